#include "evircod/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "evircod/special.hpp"

namespace evircod {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

// C (M x N) = or += op(A) * op(B), op(A) is M x K. Vectorized kernels peel by
// buffer alignment, so results on raw heap pointers would depend on where the
// allocator put them; every operand is presented to Eigen as aligned, copying
// the ones that are not.
using AlignedConstMap = Eigen::Map<const RowMat, Eigen::AlignedMax>;
using AlignedMap = Eigen::Map<RowMat, Eigen::AlignedMax>;

bool is_aligned(const double* p) { return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0; }

const double* aligned_view(const double* p, std::int64_t rows, std::int64_t cols, RowMat& scratch) {
  if (is_aligned(p)) return p;
  scratch = ConstMap(p, rows, cols);
  return scratch.data();
}

template <class Dst>
void product_into(Dst&& dst, const AlignedConstMap& A, bool trans_a, const AlignedConstMap& B, bool trans_b,
                  bool accumulate) {
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) dst.noalias() += lhs * rhs;
    else dst.noalias() = lhs * rhs;
  };
  if (trans_a && trans_b) run(A.transpose(), B.transpose());
  else if (trans_a) run(A.transpose(), B);
  else if (trans_b) run(A, B.transpose());
  else run(A, B);
}

void gemm(const double* a, bool trans_a, const double* b, bool trans_b, double* c, std::int64_t M, std::int64_t N,
          std::int64_t K, bool accumulate) {
  RowMat sa, sb;
  const std::int64_t ar = trans_a ? K : M, ac = trans_a ? M : K;
  const std::int64_t br = trans_b ? N : K, bc = trans_b ? K : N;
  AlignedConstMap A(aligned_view(a, ar, ac, sa), ar, ac);
  AlignedConstMap B(aligned_view(b, br, bc, sb), br, bc);
  if (is_aligned(c)) {
    product_into(AlignedMap(c, M, N), A, trans_a, B, trans_b, accumulate);
    return;
  }
  RowMat C(M, N);
  if (accumulate) C = ConstMap(c, M, N);
  product_into(C, A, trans_a, B, trans_b, accumulate);
  std::copy(C.data(), C.data() + M * N, c);
}

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

// Two operand stride sets walked over a common output shape; stride 0 marks a
// broadcast dimension.
struct StridePlan {
  Shape out;
  std::vector<std::int64_t> sa;
  std::vector<std::int64_t> sb;
};

StridePlan broadcast_plan(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  StridePlan p;
  p.out.resize(n);
  p.sa.assign(n, 0);
  p.sb.assign(n, 0);
  const auto ca = contiguous_strides(a);
  const auto cb = contiguous_strides(b);
  for (std::size_t i = 0; i < n; ++i) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(n - a.size());
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(n - b.size());
    const int da = ia >= 0 ? a[ia] : 1;
    const int db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[i] = da == 1 ? db : da;
    if (ia >= 0 && da != 1) p.sa[i] = ca[ia];
    if (ib >= 0 && db != 1) p.sb[i] = cb[ib];
  }
  return p;
}

template <typename F>
void walk(const StridePlan& p, F&& f) {
  const std::size_t n = p.out.size();
  if (n == 0) {
    f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  const std::int64_t total = numel_of(p.out);
  if (total == 0) return;
  const std::int64_t inner = p.out[n - 1];
  const std::int64_t sa_in = p.sa[n - 1];
  const std::int64_t sb_in = p.sb[n - 1];
  std::vector<int> idx(n, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < total; i += inner) {
    for (std::int64_t k = 0; k < inner; ++k) f(i + k, ia + k * sa_in, ib + k * sb_in);
    for (int d = static_cast<int>(n) - 2; d >= 0; --d) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const double* A = a.data().data();
  const double* B = b.data().data();
  if (a.shape() == b.shape()) {
    const std::size_t n = static_cast<std::size_t>(a.numel());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(A[i], B[i]);
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(out), {a, b}, [an, bn, da, db](Node& self) {
      const double* g = self.grad.data();
      const double* A = an->value.data();
      const double* B = bn->value.data();
      const std::size_t n = self.value.size();
      if (an->requires_grad) {
        double* ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(A[i], B[i]);
      }
      if (bn->requires_grad) {
        double* gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * db(A[i], B[i]);
      }
    });
  }
  StridePlan p = broadcast_plan(a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(numel_of(p.out)));
  walk(p, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { out[i] = f(A[ia], B[ib]); });
  auto an = a.node(), bn = b.node();
  Shape shape = p.out;
  return make_result(std::move(shape), std::move(out), {a, b}, [p, an, bn, da, db](Node& self) {
    const double* g = self.grad.data();
    const double* A = an->value.data();
    const double* B = bn->value.data();
    double* ga = an->requires_grad ? an->grad_buffer() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
    walk(p, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      if (ga) ga[ia] += g[i] * da(A[ia], B[ib]);
      if (gb) gb[ib] += g[i] * db(A[ia], B[ib]);
    });
  });
}

// d(x, y) is the derivative given input x and output y.
template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D d) {
  const std::size_t n = static_cast<std::size_t>(x.numel());
  const double* X = x.data().data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(X[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, d](Node& self) {
    const double* g = self.grad.data();
    const double* X = xn->value.data();
    const double* Y = self.value.data();
    double* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * d(X[i], Y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor rsub_scalar(double s, const Tensor& a) {
  return unary(a, [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary(
      x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor digamma(const Tensor& x) {
  return unary(
      x, [](double v) { return evircod::digamma(v); }, [](double v, double) { return trigamma(v); });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  return binary(
      logits, targets,
      [](double x, double t) { return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x))); },
      [](double x, double t) { return stable_sigmoid(x) - t; },
      [](double x, double) { return -x; });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  const auto v = x.data();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  auto xn = x.node();
  return make_result(Shape{}, {s}, {x}, [xn](Node& self) {
    const double g = self.grad[0];
    double* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdim) {
  const int rank = x.dim();
  std::vector<bool> reduce(static_cast<std::size_t>(rank), false);
  for (int a : axes) reduce[static_cast<std::size_t>(normalize_axis(a, rank))] = true;
  Shape kept = x.shape();
  for (int i = 0; i < rank; ++i)
    if (reduce[i]) kept[i] = 1;
  const auto out_strides = contiguous_strides(kept);
  StridePlan p;
  p.out = x.shape();
  p.sa = contiguous_strides(x.shape());
  p.sb.assign(static_cast<std::size_t>(rank), 0);
  for (int i = 0; i < rank; ++i)
    if (!reduce[i]) p.sb[i] = out_strides[i];

  std::vector<double> out(static_cast<std::size_t>(numel_of(kept)), 0.0);
  const double* X = x.data().data();
  walk(p, [&](std::int64_t, std::int64_t ix, std::int64_t io) { out[io] += X[ix]; });

  Shape final_shape;
  if (keepdim) {
    final_shape = kept;
  } else {
    for (int i = 0; i < rank; ++i)
      if (!reduce[i]) final_shape.push_back(x.shape()[i]);
  }
  auto xn = x.node();
  return make_result(std::move(final_shape), std::move(out), {x}, [p, xn](Node& self) {
    const double* g = self.grad.data();
    double* gx = xn->grad_buffer();
    walk(p, [&](std::int64_t, std::int64_t ix, std::int64_t io) { gx[ix] += g[io]; });
  });
}

Tensor mean_axes(const Tensor& x, std::vector<int> axes, bool keepdim) {
  std::int64_t count = 1;
  for (int a : axes) count *= x.size(a);
  return mul_scalar(sum_axes(x, std::move(axes), keepdim), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// layout

Tensor reshape(const Tensor& x, Shape shape) {
  int infer = -1;
  std::int64_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) throw ShapeError("reshape: cannot infer dimension");
    shape[infer] = static_cast<int>(x.numel() / known);
  }
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result(std::move(shape), std::move(out), {x}, [xn](Node& self) {
    double* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, std::vector<int> order) {
  const int rank = x.dim();
  if (static_cast<int>(order.size()) != rank) throw ShapeError("permute: order rank mismatch");
  const auto in_strides = contiguous_strides(x.shape());
  StridePlan p;
  p.out.resize(rank);
  p.sa.resize(rank);
  p.sb.assign(static_cast<std::size_t>(rank), 0);
  for (int i = 0; i < rank; ++i) {
    const int src = normalize_axis(order[i], rank);
    p.out[i] = x.shape()[src];
    p.sa[i] = in_strides[src];
  }
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* X = x.data().data();
  walk(p, [&](std::int64_t i, std::int64_t ix, std::int64_t) { out[i] = X[ix]; });
  auto xn = x.node();
  Shape shape = p.out;
  return make_result(std::move(shape), std::move(out), {x}, [p, xn](Node& self) {
    const double* g = self.grad.data();
    double* gx = xn->grad_buffer();
    walk(p, [&](std::int64_t i, std::int64_t ix, std::int64_t) { gx[ix] += g[i]; });
  });
}

Tensor transpose(const Tensor& x, int a, int b) {
  std::vector<int> order(static_cast<std::size_t>(x.dim()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[normalize_axis(a, x.dim())], order[normalize_axis(b, x.dim())]);
  return permute(x, std::move(order));
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const int rank = xs[0].dim();
  axis = normalize_axis(axis, rank);
  Shape shape = xs[0].shape();
  int total = 0;
  for (const Tensor& t : xs) {
    if (t.dim() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && t.shape()[i] != shape[i]) {
        throw ShapeError("concat: " + to_string(t.shape()) + " vs " + to_string(shape));
      }
    }
    total += t.shape()[axis];
  }
  shape[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[i];

  std::vector<double> out(static_cast<std::size_t>(numel_of(shape)));
  std::vector<std::int64_t> widths;
  std::int64_t offset = 0;
  for (const Tensor& t : xs) {
    const std::int64_t w = t.shape()[axis] * inner;
    const double* X = t.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(X + o * w, X + (o + 1) * w, out.begin() + o * total * inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const Tensor& t : xs) nodes.push_back(t.node());
  const std::int64_t row = total * inner;
  return make_result(std::move(shape), std::move(out), xs, [nodes, widths, outer, row](Node& self) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const std::int64_t w = widths[k];
      if (nodes[k]->requires_grad) {
        double* gx = nodes[k]->grad_buffer();
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* g = self.grad.data() + o * row + off;
          for (std::int64_t i = 0; i < w; ++i) gx[o * w + i] += g[i];
        }
      }
      off += w;
    }
  });
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  const int rank = x.dim();
  axis = normalize_axis(axis, rank);
  const int extent = x.shape()[axis];
  if (start < 0 || length < 0 || start + length > extent) throw ShapeError("slice out of range");
  Shape shape = x.shape();
  shape[axis] = length;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[i];
  const std::int64_t in_row = static_cast<std::int64_t>(extent) * inner;
  const std::int64_t out_row = static_cast<std::int64_t>(length) * inner;
  const std::int64_t off = static_cast<std::int64_t>(start) * inner;
  std::vector<double> out(static_cast<std::size_t>(numel_of(shape)));
  const double* X = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(X + o * in_row + off, X + o * in_row + off + out_row, out.begin() + o * out_row);
  }
  auto xn = x.node();
  return make_result(std::move(shape), std::move(out), {x}, [xn, outer, in_row, out_row, off](Node& self) {
    double* gx = xn->grad_buffer();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < out_row; ++i) gx[o * in_row + off + i] += self.grad[o * out_row + i];
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) throw ShapeError("matmul needs rank >= 2");
  const int K = a.size(-1);
  if (b.size(-2) != K) throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const int N = b.size(-1);
  const int M = a.size(-2);
  Shape shape = a.shape();
  shape.back() = N;
  auto an = a.node(), bn = b.node();

  if (b.dim() == 2) {
    const std::int64_t rows = a.numel() / K;
    std::vector<double> out(static_cast<std::size_t>(rows * N));
    gemm(a.data().data(), false, b.data().data(), false, out.data(), rows, N, K, false);
    return make_result(std::move(shape), std::move(out), {a, b}, [an, bn, rows, K, N](Node& self) {
      const double* g = self.grad.data();
      if (an->requires_grad) gemm(g, false, bn->value.data(), true, an->grad_buffer(), rows, K, N, true);
      if (bn->requires_grad) gemm(an->value.data(), true, g, false, bn->grad_buffer(), K, N, rows, true);
    });
  }

  if (a.dim() != b.dim()) throw ShapeError("matmul: batched operands need equal rank");
  for (int i = 0; i < a.dim() - 2; ++i) {
    if (a.shape()[i] != b.shape()[i]) throw ShapeError("matmul: batch dims differ");
  }
  const std::int64_t batch = a.numel() / (static_cast<std::int64_t>(M) * K);
  std::vector<double> out(static_cast<std::size_t>(batch * M * N));
  for (std::int64_t t = 0; t < batch; ++t) {
    gemm(a.data().data() + t * M * K, false, b.data().data() + t * K * N, false, out.data() + t * M * N, M, N, K, false);
  }
  return make_result(std::move(shape), std::move(out), {a, b}, [an, bn, batch, M, K, N](Node& self) {
    for (std::int64_t t = 0; t < batch; ++t) {
      const double* g = self.grad.data() + t * M * N;
      if (an->requires_grad) {
        gemm(g, false, bn->value.data() + t * K * N, true, an->grad_buffer() + t * M * K, M, K, N, true);
      }
      if (bn->requires_grad) {
        gemm(an->value.data() + t * M * K, true, g, false, bn->grad_buffer() + t * K * N, K, N, M, true);
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || a.dim() != b.dim()) throw ShapeError("matmul_nt: rank mismatch");
  const int K = a.size(-1);
  if (b.size(-1) != K) throw ShapeError("matmul_nt: inner dims differ");
  for (int i = 0; i < a.dim() - 2; ++i) {
    if (a.shape()[i] != b.shape()[i]) throw ShapeError("matmul_nt: batch dims differ");
  }
  const int M = a.size(-2);
  const int N = b.size(-2);
  Shape shape = a.shape();
  shape.back() = N;
  const std::int64_t batch = a.numel() / (static_cast<std::int64_t>(M) * K);
  std::vector<double> out(static_cast<std::size_t>(batch * M * N));
  for (std::int64_t t = 0; t < batch; ++t) {
    gemm(a.data().data() + t * M * K, false, b.data().data() + t * N * K, true, out.data() + t * M * N, M, N, K, false);
  }
  auto an = a.node(), bn = b.node();
  return make_result(std::move(shape), std::move(out), {a, b}, [an, bn, batch, M, K, N](Node& self) {
    for (std::int64_t t = 0; t < batch; ++t) {
      const double* g = self.grad.data() + t * M * N;
      if (an->requires_grad) {
        gemm(g, false, bn->value.data() + t * N * K, false, an->grad_buffer() + t * M * K, M, K, N, true);
      }
      if (bn->requires_grad) {
        gemm(g, true, an->value.data() + t * M * K, false, bn->grad_buffer() + t * N * K, N, K, M, true);
      }
    }
  });
}

Tensor softmax_last(const Tensor& x) {
  const std::int64_t cols = x.size(-1);
  const std::int64_t rows = x.numel() / cols;
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* X = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = X + r * cols;
    double* yr = out.data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - m));
    const double inv = 1.0 / z;
    for (std::int64_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, rows, cols](Node& self) {
    double* gx = xn->grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::int64_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::int64_t cols = x.size(-1);
  if (gamma.numel() != cols || beta.numel() != cols) throw ShapeError("layer_norm: affine size mismatch");
  const std::int64_t rows = x.numel() / cols;
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  std::vector<double> xhat(out.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  const double* X = x.data().data();
  const double* G = gamma.data().data();
  const double* B = beta.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = X + r * cols;
    double mu = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * G[c] + B[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xn, gn, bn, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const double* g = self.grad.data();
                       if (gn->requires_grad || bn->requires_grad) {
                         double* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
                         double* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
                         for (std::int64_t r = 0; r < rows; ++r) {
                           for (std::int64_t c = 0; c < cols; ++c) {
                             if (gg) gg[c] += g[r * cols + c] * xhat[r * cols + c];
                             if (gb) gb[c] += g[r * cols + c];
                           }
                         }
                       }
                       if (!xn->requires_grad) return;
                       double* gx = xn->grad_buffer();
                       const double* G = gn->value.data();
                       const double n = static_cast<double>(cols);
                       for (std::int64_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::int64_t c = 0; c < cols; ++c) {
                           const double gh = g[r * cols + c] * G[c];
                           m1 += gh;
                           m2 += gh * xhat[r * cols + c];
                         }
                         m1 /= n;
                         m2 /= n;
                         for (std::int64_t c = 0; c < cols; ++c) {
                           const double gh = g[r * cols + c] * G[c];
                           gx[r * cols + c] += inv_std[r] * (gh - m1 - xhat[r * cols + c] * m2);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// image ops

namespace {

struct ConvGeom {
  int batch, in_c, in_h, in_w, out_c, k_h, k_w, out_h, out_w, stride, pad;
  std::int64_t col_rows() const { return static_cast<std::int64_t>(in_c) * k_h * k_w; }
  std::int64_t col_cols() const { return static_cast<std::int64_t>(out_h) * out_w; }
  bool pointwise() const { return k_h == 1 && k_w == 1 && stride == 1 && pad == 0; }
};

void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::int64_t ncols = g.col_cols();
  for (int c = 0; c < g.in_c; ++c) {
    for (int ky = 0; ky < g.k_h; ++ky) {
      for (int kx = 0; kx < g.k_w; ++kx) {
        double* row = cols + ((static_cast<std::int64_t>(c) * g.k_h + ky) * g.k_w + kx) * ncols;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            row[oy * g.out_w + ox] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                                         ? x[(static_cast<std::int64_t>(c) * g.in_h + iy) * g.in_w + ix]
                                         : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* cols, double* x) {
  const std::int64_t ncols = g.col_cols();
  for (int c = 0; c < g.in_c; ++c) {
    for (int ky = 0; ky < g.k_h; ++ky) {
      for (int kx = 0; kx < g.k_w; ++kx) {
        const double* row = cols + ((static_cast<std::int64_t>(c) * g.k_h + ky) * g.k_w + kx) * ncols;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            x[(static_cast<std::int64_t>(c) * g.in_h + iy) * g.in_w + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (x.dim() != 4 || weight.dim() != 4) throw ShapeError("conv2d expects NCHW input and OIHW weight");
  if (x.size(1) != weight.size(1)) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  ConvGeom g{};
  g.batch = x.size(0);
  g.in_c = x.size(1);
  g.in_h = x.size(2);
  g.in_w = x.size(3);
  g.out_c = weight.size(0);
  g.k_h = weight.size(2);
  g.k_w = weight.size(3);
  g.stride = stride;
  g.pad = padding;
  g.out_h = (g.in_h + 2 * padding - g.k_h) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - g.k_w) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != g.out_c) throw ShapeError("conv2d: bias size mismatch");

  const std::int64_t in_plane = static_cast<std::int64_t>(g.in_c) * g.in_h * g.in_w;
  const std::int64_t out_plane = static_cast<std::int64_t>(g.out_c) * g.col_cols();
  std::vector<double> out(static_cast<std::size_t>(g.batch * out_plane));
  std::vector<double> cols(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  for (int b = 0; b < g.batch; ++b) {
    const double* xb = x.data().data() + b * in_plane;
    const double* src = xb;
    if (!g.pointwise()) {
      im2col(g, xb, cols.data());
      src = cols.data();
    }
    double* ob = out.data() + b * out_plane;
    gemm(weight.data().data(), false, src, false, ob, g.out_c, g.col_cols(), g.col_rows(), false);
    if (has_bias) {
      for (int o = 0; o < g.out_c; ++o) {
        const double bo = bias.data()[o];
        for (std::int64_t j = 0; j < g.col_cols(); ++j) ob[o * g.col_cols() + j] += bo;
      }
    }
  }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  auto xn = x.node(), wn = weight.node();
  auto bn = has_bias ? bias.node() : nullptr;
  return make_result(Shape{g.batch, g.out_c, g.out_h, g.out_w}, std::move(out), inputs,
                     [g, xn, wn, bn, in_plane, out_plane](Node& self) {
                       std::vector<double> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
                       const double* W = wn->value.data();
                       for (int b = 0; b < g.batch; ++b) {
                         const double* gb = self.grad.data() + b * out_plane;
                         if (bn && bn->requires_grad) {
                           double* gbias = bn->grad_buffer();
                           for (int o = 0; o < g.out_c; ++o) {
                             double sum = 0.0;
                             for (std::int64_t j = 0; j < g.col_cols(); ++j) sum += gb[o * g.col_cols() + j];
                             gbias[o] += sum;
                           }
                         }
                         const double* xb = xn->value.data() + b * in_plane;
                         if (wn->requires_grad) {
                           const double* src = xb;
                           if (!g.pointwise()) {
                             im2col(g, xb, cols.data());
                             src = cols.data();
                           }
                           gemm(gb, false, src, true, wn->grad_buffer(), g.out_c, g.col_rows(), g.col_cols(), true);
                         }
                         if (xn->requires_grad) {
                           double* gx = xn->grad_buffer() + b * in_plane;
                           if (g.pointwise()) {
                             gemm(W, true, gb, false, gx, g.in_c, g.col_cols(), g.out_c, true);
                           } else {
                             gemm(W, true, gb, false, cols.data(), g.col_rows(), g.col_cols(), g.out_c, false);
                             col2im(g, cols.data(), gx);
                           }
                         }
                       }
                     });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum, double eps) {
  if (x.dim() != 4) throw ShapeError("batch_norm2d expects NCHW");
  const int B = x.size(0), C = x.size(1);
  const std::int64_t HW = static_cast<std::int64_t>(x.size(2)) * x.size(3);
  const std::int64_t count = B * HW;
  const double* X = x.data().data();
  std::vector<double> mu(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < HW; ++i) s += X[(static_cast<std::int64_t>(b) * C + c) * HW + i];
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (int b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < HW; ++i) {
          const double d = X[(static_cast<std::int64_t>(b) * C + c) * HW + i] - m;
          v += d * d;
        }
      const double biased = v / static_cast<double>(count);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : biased;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(biased + eps);
      auto rm = running_mean.data_mut();
      auto rv = running_var.data_mut();
      rm[c] = (1.0 - momentum) * rm[c] + momentum * m;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
    }
  }
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  std::vector<double> xhat(out.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HW; ++i) {
        const std::int64_t k = (static_cast<std::int64_t>(b) * C + c) * HW + i;
        xhat[k] = (X[k] - mu[c]) * inv_std[c];
        out[k] = xhat[k] * gamma.data()[c] + beta.data()[c];
      }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, B, C, HW, count, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const double* g = self.grad.data();
        std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0), sum_gx(static_cast<std::size_t>(C), 0.0);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < HW; ++i) {
              const std::int64_t k = (static_cast<std::int64_t>(b) * C + c) * HW + i;
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (gn->requires_grad) {
          double* gg = gn->grad_buffer();
          for (int c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (bn->requires_grad) {
          double* gb = bn->grad_buffer();
          for (int c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (!xn->requires_grad) return;
        double* gx = xn->grad_buffer();
        const double n = static_cast<double>(count);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const double scale = gn->value[c] * inv_std[c];
            for (std::int64_t i = 0; i < HW; ++i) {
              const std::int64_t k = (static_cast<std::int64_t>(b) * C + c) * HW + i;
              gx[k] += training ? scale * (g[k] - sum_g[c] / n - xhat[k] * sum_gx[c] / n) : scale * g[k];
            }
          }
      });
}

namespace {

struct Taps {
  std::vector<int> lo, hi;
  std::vector<double> w_hi;
};

Taps bilinear_taps(int in, int out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[o] = lo;
    t.hi[o] = lo < in - 1 ? lo + 1 : lo;
    t.w_hi[o] = src - lo;
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  if (x.dim() != 4) throw ShapeError("resize_bilinear expects NCHW");
  const int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const Taps ty = bilinear_taps(H, out_h);
  const Taps tx = bilinear_taps(W, out_w);
  const std::int64_t planes = static_cast<std::int64_t>(B) * C;
  std::vector<double> out(static_cast<std::size_t>(planes * out_h * out_w));
  const double* X = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = X + p * H * W;
    double* dst = out.data() + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double wy = ty.w_hi[oy];
      const double* r0 = src + ty.lo[oy] * W;
      const double* r1 = src + ty.hi[oy] * W;
      for (int ox = 0; ox < out_w; ++ox) {
        const double wx = tx.w_hi[ox];
        const int x0 = tx.lo[ox], x1 = tx.hi[ox];
        const double top = r0[x0] + wx * (r0[x1] - r0[x0]);
        const double bot = r1[x0] + wx * (r1[x1] - r1[x0]);
        dst[oy * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  auto xn = x.node();
  return make_result(Shape{B, C, out_h, out_w}, std::move(out), {x},
                     [xn, ty, tx, planes, H, W, out_h, out_w](Node& self) {
                       double* gx = xn->grad_buffer();
                       for (std::int64_t p = 0; p < planes; ++p) {
                         const double* g = self.grad.data() + p * out_h * out_w;
                         double* dst = gx + p * H * W;
                         for (int oy = 0; oy < out_h; ++oy) {
                           const double wy = ty.w_hi[oy];
                           for (int ox = 0; ox < out_w; ++ox) {
                             const double wx = tx.w_hi[ox];
                             const double v = g[oy * out_w + ox];
                             dst[ty.lo[oy] * W + tx.lo[ox]] += v * (1 - wy) * (1 - wx);
                             dst[ty.lo[oy] * W + tx.hi[ox]] += v * (1 - wy) * wx;
                             dst[ty.hi[oy] * W + tx.lo[ox]] += v * wy * (1 - wx);
                             dst[ty.hi[oy] * W + tx.hi[ox]] += v * wy * wx;
                           }
                         }
                       }
                     });
}

Tensor sample_token_grid(const Tensor& values, const Tensor& offsets, int side, double scale) {
  if (values.dim() != 4 || offsets.dim() != 4 || offsets.size(3) != 2) {
    throw ShapeError("sample_token_grid: values B x H x N x d, offsets B x H x N x 2");
  }
  const int B = values.size(0), Hh = values.size(1), N = values.size(2), d = values.size(3);
  if (offsets.size(0) != B || offsets.size(1) != Hh || offsets.size(2) != N) {
    throw ShapeError("sample_token_grid: offsets " + to_string(offsets.shape()) + " vs values " +
                     to_string(values.shape()));
  }
  if (side * side != N) throw ShapeError("sample_token_grid: token count is not side^2");

  const std::int64_t groups = static_cast<std::int64_t>(B) * Hh;
  std::vector<double> out(static_cast<std::size_t>(values.numel()), 0.0);
  const double* V = values.data().data();
  const double* O = offsets.data().data();
  for (std::int64_t gi = 0; gi < groups; ++gi) {
    const double* vg = V + gi * N * d;
    for (int j = 0; j < N; ++j) {
      const double px = (j % side) + scale * O[(gi * N + j) * 2 + 0];
      const double py = (j / side) + scale * O[(gi * N + j) * 2 + 1];
      const double fx0 = std::floor(px), fy0 = std::floor(py);
      const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      const double fx = px - fx0, fy = py - fy0;
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      double* dst = out.data() + (gi * N + j) * d;
      for (int t = 0; t < 4; ++t) {
        if (xs[t] < 0 || xs[t] >= side || ys[t] < 0 || ys[t] >= side) continue;
        const double* src = vg + static_cast<std::int64_t>(ys[t] * side + xs[t]) * d;
        for (int c = 0; c < d; ++c) dst[c] += ws[t] * src[c];
      }
    }
  }
  auto vn = values.node(), on = offsets.node();
  return make_result(values.shape(), std::move(out), {values, offsets},
                     [vn, on, groups, N, d, side, scale](Node& self) {
                       const double* V = vn->value.data();
                       const double* O = on->value.data();
                       double* gv = vn->requires_grad ? vn->grad_buffer() : nullptr;
                       double* go = on->requires_grad ? on->grad_buffer() : nullptr;
                       for (std::int64_t gi = 0; gi < groups; ++gi) {
                         for (int j = 0; j < N; ++j) {
                           const double px = (j % side) + scale * O[(gi * N + j) * 2 + 0];
                           const double py = (j / side) + scale * O[(gi * N + j) * 2 + 1];
                           const double fx0 = std::floor(px), fy0 = std::floor(py);
                           const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
                           const double fx = px - fx0, fy = py - fy0;
                           const double* g = self.grad.data() + (gi * N + j) * d;
                           auto tap = [&](int x, int y) -> const double* {
                             if (x < 0 || x >= side || y < 0 || y >= side) return nullptr;
                             return V + (gi * N + static_cast<std::int64_t>(y * side + x)) * d;
                           };
                           const double* v00 = tap(x0, y0);
                           const double* v01 = tap(x0 + 1, y0);
                           const double* v10 = tap(x0, y0 + 1);
                           const double* v11 = tap(x0 + 1, y0 + 1);
                           if (gv) {
                             const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
                             const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
                             const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
                             for (int t = 0; t < 4; ++t) {
                               if (xs[t] < 0 || xs[t] >= side || ys[t] < 0 || ys[t] >= side) continue;
                               double* dst = gv + (gi * N + static_cast<std::int64_t>(ys[t] * side + xs[t])) * d;
                               for (int c = 0; c < d; ++c) dst[c] += ws[t] * g[c];
                             }
                           }
                           if (go) {
                             double dx = 0.0, dy = 0.0;
                             for (int c = 0; c < d; ++c) {
                               const double a = v00 ? v00[c] : 0.0;
                               const double b = v01 ? v01[c] : 0.0;
                               const double e = v10 ? v10[c] : 0.0;
                               const double f = v11 ? v11[c] : 0.0;
                               dx += g[c] * ((1 - fy) * (b - a) + fy * (f - e));
                               dy += g[c] * ((1 - fx) * (e - a) + fx * (f - b));
                             }
                             go[(gi * N + j) * 2 + 0] += scale * dx;
                             go[(gi * N + j) * 2 + 1] += scale * dy;
                           }
                         }
                       }
                     });
}

Tensor sobel_xy(const Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 1) throw ShapeError("sobel_xy expects B x 1 x H x W");
  static const Tensor kernel(Shape{2, 1, 3, 3}, std::vector<double>{
                                                    -1, 0, 1, -2, 0, 2, -1, 0, 1,  // d/dx
                                                    -1, -2, -1, 0, 0, 0, 1, 2, 1,  // d/dy
                                                });
  return conv2d(x, kernel, Tensor(), 1, 1);
}

}  // namespace evircod
