#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evircod {

using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when tensor shapes or arguments violate an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major array of doubles that records the operations applied to it
/// so that gradients can be pulled back with backward().
///
/// Tensors are handles: copying a Tensor shares the underlying storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim() const;
  /// Size along `axis`; negative axes count from the back.
  int size(int axis) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> data_mut();
  double item() const;
  double at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  /// Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and propagates; this must hold a single element.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

/// Wraps a freshly computed value as a graph node. `backward` is attached only
/// when recording is on and some input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward);
Tensor make_result(Shape shape, std::vector<double> value,
                   const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace evircod
