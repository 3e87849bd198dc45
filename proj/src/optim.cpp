#include "evircod/optim.hpp"

#include <cmath>
#include <numbers>

#include "evircod/errors.hpp"

namespace evircod::optim {

double cosine_lr(double base_lr, double floor, std::int64_t step, std::int64_t t_max) {
  if (t_max <= 0 || step >= t_max) return step <= 0 ? base_lr : floor;
  const double t = static_cast<double>(step) / static_cast<double>(t_max);
  return floor + 0.5 * (base_lr - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(std::vector<nn::ParamRef> params, AdamOptions options)
    : params_(std::move(params)), options_(options), counts_(params_.size(), 0) {
  if (!(options_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].tensor;
    auto g = p.grad();
    if (g.empty()) continue;
    const std::int64_t n = ++counts_[i];
    const double lr = options_.lr * (params_[i].group == nn::ParamGroup::backbone ? options_.backbone_scale : 1.0);
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(n));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(n));
    auto w = p.data_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] + options_.weight_decay * w[k];
      m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * gk;
      v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor->node()->grad.clear();
}

std::vector<double> Adam::state() const {
  std::vector<double> out{static_cast<double>(t_)};
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back(static_cast<double>(counts_[i]));
    out.insert(out.end(), m_[i].begin(), m_[i].end());
    out.insert(out.end(), v_[i].begin(), v_[i].end());
  }
  return out;
}

void Adam::load_state(const std::vector<double>& state) {
  std::size_t expected = 1;
  for (const auto& m : m_) expected += 1 + 2 * m.size();
  if (state.size() != expected) throw ConfigError("optimizer state does not match the parameter layout");
  std::size_t k = 0;
  t_ = static_cast<std::int64_t>(state[k++]);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    counts_[i] = static_cast<std::int64_t>(state[k++]);
    for (double& x : m_[i]) x = state[k++];
    for (double& x : v_[i]) x = state[k++];
  }
}

}  // namespace evircod::optim
