#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "evircod/ops.hpp"
#include "evircod/tensor.hpp"

namespace evircod::nn {

using Rng = std::mt19937_64;

/// Optimizer parameter groups: the backbone stand-in trains at a scaled rate.
enum class ParamGroup { head, backbone };

struct ParamRef {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
};

/// Base for anything owning trainable parameters or running buffers.
/// Modules register their members once at construction; the registry holds
/// pointers into the object, so modules are neither copyable nor movable.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  /// Depth-first, registration-ordered list of parameters.
  std::vector<ParamRef> parameters() const;
  /// Non-trainable state (batch-norm running statistics).
  std::vector<ParamRef> buffers() const;
  std::int64_t parameter_count() const;

  void set_training(bool on);
  bool training() const { return training_; }
  void set_group(ParamGroup g);
  void zero_grad();

 protected:
  Tensor& register_parameter(std::string name, Tensor t);
  Tensor& register_buffer(std::string name, Tensor t);
  void register_module(std::string name, Module& child);

 private:
  struct Slot {
    std::string name;
    std::unique_ptr<Tensor> tensor;
  };
  void collect(const std::string& prefix, bool want_buffers, std::vector<ParamRef>& out) const;

  std::vector<Slot> params_;
  std::vector<Slot> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
  ParamGroup group_ = ParamGroup::head;
};

/// y = x W + b over the last axis; W is in_features x out_features.
class Linear : public Module {
 public:
  Linear(int in_features, int out_features, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_, out_;
  Tensor& weight_;
  Tensor& bias_;
};

class Conv2d : public Module {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  int stride_, padding_;
  Tensor& weight_;
  Tensor& bias_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x);

 private:
  double momentum_, eps_;
  Tensor& gamma_;
  Tensor& beta_;
  Tensor& running_mean_;
  Tensor& running_var_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(int features, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;

 private:
  double eps_;
  Tensor& gamma_;
  Tensor& beta_;
};

/// 1x1 or kxk convolution -> batch norm -> ReLU.
class ConvBnRelu : public Module {
 public:
  ConvBnRelu(int in_channels, int out_channels, int kernel, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

/// Uniform(-bound, bound) initialised tensor.
Tensor uniform(Shape shape, double bound, Rng& rng);

}  // namespace evircod::nn
