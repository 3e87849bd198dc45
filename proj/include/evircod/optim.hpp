#pragma once

#include <cstdint>
#include <vector>

#include "evircod/nn.hpp"

namespace evircod::optim {

/// Cosine annealing from base_lr at step 0 to floor at step t_max (held after).
double cosine_lr(double base_lr, double floor, std::int64_t step, std::int64_t t_max);

struct AdamOptions {
  double lr = 1e-4;
  double backbone_scale = 0.1;  // multiplier for ParamGroup::backbone
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam over a fixed parameter list. Parameters that received no gradient in
/// a step (disabled modules) are left untouched, moments included.
class Adam {
 public:
  Adam(std::vector<nn::ParamRef> params, AdamOptions options);

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  void step();
  void zero_grad();
  std::int64_t steps() const { return t_; }

  /// Flat optimizer state for checkpoints: t, then m and v of every parameter.
  std::vector<double> state() const;
  void load_state(const std::vector<double>& state);

 private:
  std::vector<nn::ParamRef> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::int64_t> counts_;
  std::int64_t t_ = 0;
};

}  // namespace evircod::optim
