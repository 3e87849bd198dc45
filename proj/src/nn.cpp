#include "evircod/nn.hpp"

#include <cmath>

namespace evircod::nn {

Tensor uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

std::vector<ParamRef> Module::parameters() const {
  std::vector<ParamRef> out;
  collect("", false, out);
  return out;
}

std::vector<ParamRef> Module::buffers() const {
  std::vector<ParamRef> out;
  collect("", true, out);
  return out;
}

std::int64_t Module::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->numel();
  return n;
}

void Module::collect(const std::string& prefix, bool want_buffers, std::vector<ParamRef>& out) const {
  const auto& slots = want_buffers ? buffers_ : params_;
  for (const auto& s : slots) {
    if (s.tensor->defined()) out.push_back({prefix + s.name, s.tensor.get(), group_});
  }
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", want_buffers, out);
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

void Module::set_group(ParamGroup g) {
  group_ = g;
  for (auto& [name, child] : children_) child->set_group(g);
}

void Module::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

Tensor& Module::register_parameter(std::string name, Tensor t) {
  if (t.defined()) t.set_requires_grad(true);
  params_.push_back({std::move(name), std::make_unique<Tensor>(std::move(t))});
  return *params_.back().tensor;
}

Tensor& Module::register_buffer(std::string name, Tensor t) {
  buffers_.push_back({std::move(name), std::make_unique<Tensor>(std::move(t))});
  return *buffers_.back().tensor;
}

void Module::register_module(std::string name, Module& child) { children_.emplace_back(std::move(name), &child); }

Linear::Linear(int in_features, int out_features, Rng& rng, bool bias)
    : in_(in_features),
      out_(out_features),
      weight_(register_parameter(
          "weight", uniform({in_features, out_features}, std::sqrt(6.0 / (in_features + out_features)), rng))),
      bias_(register_parameter("bias", bias ? Tensor(Shape{out_features}, 0.0, true) : Tensor())) {}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight_);
  return bias_.defined() ? add(y, bias_) : y;
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng, bool bias)
    : stride_(stride),
      padding_(padding),
      weight_(register_parameter("weight", uniform({out_channels, in_channels, kernel, kernel},
                                                   std::sqrt(6.0 / (in_channels * kernel * kernel)), rng))),
      bias_(register_parameter("bias", bias ? Tensor(Shape{out_channels}, 0.0, true) : Tensor())) {}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : momentum_(momentum),
      eps_(eps),
      gamma_(register_parameter("gamma", Tensor(Shape{channels}, 1.0, true))),
      beta_(register_parameter("beta", Tensor(Shape{channels}, 0.0, true))),
      running_mean_(register_buffer("running_mean", Tensor(Shape{channels}, 0.0))),
      running_var_(register_buffer("running_var", Tensor(Shape{channels}, 1.0))) {}

Tensor BatchNorm2d::forward(const Tensor& x) {
  return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training(), momentum_, eps_);
}

LayerNorm::LayerNorm(int features, double eps)
    : eps_(eps),
      gamma_(register_parameter("gamma", Tensor(Shape{features}, 1.0, true))),
      beta_(register_parameter("beta", Tensor(Shape{features}, 0.0, true))) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm_last(x, gamma_, beta_, eps_); }

ConvBnRelu::ConvBnRelu(int in_channels, int out_channels, int kernel, Rng& rng)
    : conv_(in_channels, out_channels, kernel, 1, kernel / 2, rng), bn_(out_channels) {
  register_module("conv", conv_);
  register_module("bn", bn_);
}

Tensor ConvBnRelu::forward(const Tensor& x) { return relu(bn_.forward(conv_.forward(x))); }

}  // namespace evircod::nn
