#include "evircod/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace evircod {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->value.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim() const { return static_cast<int>(node_->shape.size()); }

int Tensor::size(int axis) const {
  const int d = dim();
  if (axis < 0) axis += d;
  if (axis < 0 || axis >= d) throw ShapeError("axis out of range for " + to_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->value.size()); }

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::data_mut() { return node_->value; }

double Tensor::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != dim()) throw ShapeError("index rank mismatch");
  std::int64_t off = 0;
  int axis = 0;
  for (int i : index) {
    off = off * node_->shape[static_cast<std::size_t>(axis)] + i;
    ++axis;
  }
  return node_->value.at(static_cast<std::size_t>(off));
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_mut() {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() needs a single-element tensor");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor Tensor::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

namespace {
template <typename Range>
Tensor make_result_impl(Shape shape, std::vector<double> value, const Range& inputs,
                        std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  return make_result_impl(std::move(shape), std::move(value), inputs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  return make_result_impl(std::move(shape), std::move(value), inputs, std::move(backward));
}

}  // namespace detail

}  // namespace evircod
