#pragma once

// Differentiable primitives. Each op validates shapes, computes its forward
// value eagerly and registers the backward rule through make_result.

// Small products otherwise take a path whose summation order follows pointer alignment.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "clipbench/faults.hpp"
#include "clipbench/tensor.hpp"

namespace clipbench {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

inline ConstMapMat cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMapMat(p, static_cast<Index>(r), static_cast<Index>(c));
}
inline MapMat mmap(double* p, std::size_t r, std::size_t c) {
  return MapMat(p, static_cast<Index>(r), static_cast<Index>(c));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

inline std::size_t normalize_axis(const char* op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename F>
Tensor unary(const char* op, const Tensor& x, F f,
             std::function<double(double x, double y)> dfdx) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, x.shape(), std::move(out), {x},
                     [x, dfdx](Node& self) {
                       auto gx = grad_sink(x);
                       const auto in = x.data();
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += self.grad[i] * dfdx(in[i], self.data[i]);
                     });
}

}  // namespace detail

// ---------------------------------------------------------------- shaping

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_result("reshape", std::move(shape), x.values(), {x}, [x](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

namespace detail {
// Strided gather: out[i] = in[src_index(i)] for a permutation of axes.
inline std::vector<std::size_t> permute_index(const Shape& in_shape,
                                              const std::vector<std::size_t>& perm) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}
}  // namespace detail

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    if (p >= rank || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
  auto map = std::make_shared<std::vector<std::size_t>>(detail::permute_index(x.shape(), perm));
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*map)[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {x},
                     [x, map](detail::Node& self) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*map)[i]] += self.grad[i];
                     });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

// Swaps the last two axes of a rank-3 tensor.
inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("transpose_last2: expected rank 3, got " + shape_str(x.shape()));
  return permute(x, {0, 2, 1});
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis_in) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  const std::size_t axis = detail::normalize_axis("concat", axis_in, xs[0].rank());
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != xs[0].rank()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < t.rank(); ++d)
      if (d != axis && t.dim(d) != xs[0].dim(d))
        throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    out_shape[axis] += t.dim(axis);
  }
  const auto split = detail::split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& t : xs) {
    const std::size_t block = t.dim(axis) * split.inner;
    const auto in = t.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(in.begin() + o * block, block,
                  out.begin() + o * split.len * split.inner + offset);
    offset += block;
  }
  return make_result("concat", out_shape, std::move(out), xs, [xs, split, axis](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& t : xs) {
      const std::size_t block = t.dim(axis) * split.inner;
      auto gt = grad_sink(t);
      if (!gt.empty())
        for (std::size_t o = 0; o < split.outer; ++o)
          for (std::size_t k = 0; k < block; ++k)
            gt[o * block + k] += self.grad[o * split.len * split.inner + offset + k];
      offset += block;
    }
  });
}

// Rows of a rank-2 tensor selected by index (repeats allowed).
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected rank 2, got " + shape_str(x.shape()));
  if (rows.empty()) throw ShapeError("gather_rows: empty index set");
  const std::size_t cols = x.dim(1);
  std::vector<double> out(rows.size() * cols);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0))
      throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " out of range " + std::to_string(x.dim(0)));
    std::copy_n(in.begin() + rows[r] * cols, cols, out.begin() + r * cols);
  }
  return make_result("gather_rows", {rows.size(), cols}, std::move(out), {x},
                     [x, rows, cols](detail::Node& self) {
                       auto gx = grad_sink(x);
                       for (std::size_t r = 0; r < rows.size(); ++r)
                         for (std::size_t c = 0; c < cols; ++c)
                           gx[rows[r] * cols + c] += self.grad[r * cols + c];
                     });
}

// ------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    for (auto g : {grad_sink(a), grad_sink(b)})
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = grad_sink(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * b[i];
    auto gb = grad_sink(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * a[i];
  });
}

// x + b where b's shape equals the trailing dimensions of x.
inline Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  if (b.rank() > x.rank() ||
      !std::equal(b.shape().begin(), b.shape().end(), x.shape().end() - static_cast<long>(b.rank())))
    throw ShapeError("add_broadcast: " + shape_str(b.shape()) + " is not a suffix of " + shape_str(x.shape()));
  const std::size_t block = b.numel();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % block];
  return make_result("add_broadcast", x.shape(), std::move(out), {x, b}, [x, b, block](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    auto gb = grad_sink(b);
    if (!gb.empty())
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % block] += self.grad[i];
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  return make_result("scale", x.shape(), std::move(out), {x}, [x, c](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * c;
  });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

namespace detail {
inline void require_scalar(const char* op, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError(std::string(op) + ": expected a one-element tensor, got " + shape_str(s.shape()));
}
}  // namespace detail

// x * s for a one-element tensor s.
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  detail::require_scalar("mul_scalar", s);
  const double v = s.item();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * v;
  return make_result("mul_scalar", x.shape(), std::move(out), {x, s}, [x, s](detail::Node& self) {
    const double v = s.item();
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * v;
    auto gs = grad_sink(s);
    if (!gs.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x[i];
      gs[0] += acc;
    }
  });
}

// x / s for a one-element tensor s.
inline Tensor div_scalar(const Tensor& x, const Tensor& s) {
  detail::require_scalar("div_scalar", s);
  const double v = s.item();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / v;
  return make_result("div_scalar", x.shape(), std::move(out), {x, s}, [x, s](detail::Node& self) {
    const double v = s.item();
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] / v;
    auto gs = grad_sink(s);
    if (!gs.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.data[i];
      gs[0] -= acc / v;
    }
  });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); },
                       [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw DegenerateInputError("log: non-positive input");
  return detail::unary("log", x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

// Replaces entries where mask is non-zero by `value`; no gradient flows there.
inline Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, double value) {
  if (mask.size() != x.numel()) throw ShapeError("masked_fill: mask size mismatch for " + shape_str(x.shape()));
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return make_result("masked_fill", x.shape(), std::move(out), {x}, [x, mask](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!mask[i]) gx[i] += self.grad[i];
  });
}

// -------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result("sum", {1}, {acc}, {x}, [x](detail::Node& self) {
    auto gx = grad_sink(x);
    for (auto& g : gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Mean over one axis; the axis is removed from the shape (rank >= 2).
inline Tensor mean_axis(const Tensor& x, int axis_in) {
  const std::size_t axis = detail::normalize_axis("mean_axis", axis_in, x.rank());
  if (x.rank() < 2) throw ShapeError("mean_axis: rank must be at least 2");
  const auto s = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double inv = 1.0 / static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  for (auto& v : out) v *= inv;
  return make_result("mean_axis", std::move(out_shape), std::move(out), {x}, [x, s, inv](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          gx[(o * s.len + k) * s.inner + i] += self.grad[o * s.inner + i] * inv;
  });
}

// ------------------------------------------------------------ linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::mmap(out.data(), m, n).noalias() =
      detail::cmap(a.data().data(), m, k) * detail::cmap(b.data().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
    const auto g = detail::cmap(self.grad.data(), m, n);
    if (auto ga = grad_sink(a); !ga.empty()) {
      const double s = faults().matmul_grad ? 0.5 : 1.0;
      detail::mmap(ga.data(), m, k).noalias() += s * (g * detail::cmap(b.data().data(), k, n).transpose());
    }
    if (auto gb = grad_sink(b); !gb.empty())
      detail::mmap(gb.data(), k, n).noalias() += detail::cmap(a.data().data(), m, k).transpose() * g;
  });
}

// Batched matmul: [B x m x k] x [B x k x n] -> [B x m x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(B * m * n);
  for (std::size_t i = 0; i < B; ++i)
    detail::mmap(out.data() + i * m * n, m, n).noalias() =
        detail::cmap(a.data().data() + i * m * k, m, k) * detail::cmap(b.data().data() + i * k * n, k, n);
  return make_result("bmm", {B, m, n}, std::move(out), {a, b}, [a, b, B, m, k, n](detail::Node& self) {
    auto ga = grad_sink(a);
    auto gb = grad_sink(b);
    for (std::size_t i = 0; i < B; ++i) {
      const auto g = detail::cmap(self.grad.data() + i * m * n, m, n);
      if (!ga.empty())
        detail::mmap(ga.data() + i * m * k, m, k).noalias() +=
            g * detail::cmap(b.data().data() + i * k * n, k, n).transpose();
      if (!gb.empty())
        detail::mmap(gb.data() + i * k * n, k, n).noalias() +=
            detail::cmap(a.data().data() + i * m * k, m, k).transpose() * g;
    }
  });
}

// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0))
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(1)))
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), outd = w.dim(1), rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<double> out(rows * outd);
  auto y = detail::mmap(out.data(), rows, outd);
  y.noalias() = detail::cmap(x.data().data(), rows, in) * detail::cmap(w.data().data(), in, outd);
  if (bias.defined())
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), static_cast<Eigen::Index>(outd));
  return make_result("linear", std::move(out_shape), std::move(out), {x, w, bias},
                     [x, w, bias, rows, in, outd](detail::Node& self) {
                       const auto g = detail::cmap(self.grad.data(), rows, outd);
                       if (auto gx = grad_sink(x); !gx.empty())
                         detail::mmap(gx.data(), rows, in).noalias() +=
                             g * detail::cmap(w.data().data(), in, outd).transpose();
                       if (auto gw = grad_sink(w); !gw.empty())
                         detail::mmap(gw.data(), in, outd).noalias() +=
                             detail::cmap(x.data().data(), rows, in).transpose() * g;
                       if (auto gb = grad_sink(bias); !gb.empty())
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t o = 0; o < outd; ++o) gb[o] += self.grad[r * outd + o];
                     });
}

// ------------------------------------------------------------ normalizers

inline Tensor softmax(const Tensor& x, int axis_in = -1) {
  const std::size_t axis = detail::normalize_axis("softmax", axis_in, x.rank());
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(x[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= z;
    }
  return make_result("softmax", x.shape(), std::move(out), {x}, [x, s](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k)
          dot += self.grad[base + k * s.inner] * self.data[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
  });
}

inline Tensor log_softmax(const Tensor& x, int axis_in = -1) {
  const std::size_t axis = detail::normalize_axis("log_softmax", axis_in, x.rank());
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) z += std::exp(x[base + k * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = x[base + k * s.inner] - lse;
    }
  return make_result("log_softmax", x.shape(), std::move(out), {x}, [x, s](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double gsum = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) gsum += self.grad[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += self.grad[j] - std::exp(self.data[j]) * gsum;
        }
      }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last axis, then applies optional gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain = {}, const Tensor& bias = {},
                         double eps = kLayerNormEps) {
  const std::size_t d = x.shape().back();
  for (const Tensor* p : {&gain, &bias})
    if (p->defined() && (p->rank() != 1 || p->dim(0) != d))
      throw ShapeError("layer_norm: affine shape " + shape_str(p->shape()) + " vs feature size " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * (gain.defined() ? gain[j] : 1.0) + (bias.defined() ? bias[j] : 0.0);
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                     [x, gain, bias, xhat, inv_std, rows, d](detail::Node& self) {
                       auto gx = grad_sink(x);
                       auto gg = grad_sink(gain);
                       auto gb = grad_sink(bias);
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * d;
                         const double* h = xhat->data() + r * d;
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           if (!gg.empty()) gg[j] += g[j] * h[j];
                           if (!gb.empty()) gb[j] += g[j];
                           dh[j] = g[j] * (gain.defined() ? gain[j] : 1.0);
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * h[j];
                         }
                         if (gx.empty()) continue;
                         mean_dh /= static_cast<double>(d);
                         mean_dh_h /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j)
                           gx[r * d + j] += (*inv_std)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                       }
                     });
}

inline constexpr double kMinNorm = 1e-12;

// Scales every slice along `axis` to unit Euclidean norm.
inline Tensor l2_normalize(const Tensor& x, int axis_in = -1) {
  const std::size_t axis = detail::normalize_axis("l2_normalize", axis_in, x.rank());
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto norms = std::make_shared<std::vector<double>>(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) ss += x[base + k * s.inner] * x[base + k * s.inner];
      const double n = std::sqrt(ss);
      if (!(n >= kMinNorm)) throw DegenerateInputError("l2_normalize: slice norm below 1e-12");
      (*norms)[o * s.inner + i] = n;
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = x[base + k * s.inner] / n;
    }
  return make_result("l2_normalize", x.shape(), std::move(out), {x}, [x, s, norms](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        const double n = (*norms)[o * s.inner + i];
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += self.grad[base + k * s.inner] * self.data[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += (self.grad[j] - self.data[j] * dot) / n;
        }
      }
  });
}

// ----------------------------------------------------------------- lookups

// Rows of `table` [V x D] for each id; result shape is `prefix` + [D].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids, Shape prefix) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (shape_numel(prefix) != ids.size()) throw ShapeError("embedding: id count does not match " + shape_str(prefix));
  const std::size_t V = table.dim(0), D = table.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw IndexError("embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
  std::vector<double> out(ids.size() * D);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[r]) * D, D, out.begin() + r * D);
  prefix.push_back(D);
  return make_result("embedding", std::move(prefix), std::move(out), {table}, [table, ids, D](detail::Node& self) {
    auto gt = grad_sink(table);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < D; ++c) gt[static_cast<std::size_t>(ids[r]) * D + c] += self.grad[r * D + c];
  });
}

// Mean over rows of -log softmax(logits)[row, target[row]].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  if (targets.size() != logits.dim(0)) throw ShapeError("cross_entropy: target count mismatch");
  const std::size_t M = logits.dim(0), V = logits.dim(1);
  for (auto t : targets)
    if (t >= V) throw IndexError("cross_entropy: class " + std::to_string(t) + " outside " + std::to_string(V));
  auto probs = std::make_shared<std::vector<double>>(M * V);
  double loss = 0.0;
  for (std::size_t r = 0; r < M; ++r) {
    const double* row = logits.data().data() + r * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      const double e = std::exp(row[c] - mx);
      (*probs)[r * V + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < V; ++c) (*probs)[r * V + c] /= z;
    loss -= row[targets[r]] - mx - std::log(z);
  }
  loss /= static_cast<double>(M);
  return make_result("cross_entropy", {1}, {loss}, {logits}, [logits, targets, probs, M, V](detail::Node& self) {
    auto gl = grad_sink(logits);
    const double g = self.grad[0] / static_cast<double>(M);
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t c = 0; c < V; ++c)
        gl[r * V + c] += g * ((*probs)[r * V + c] - (c == targets[r] ? 1.0 : 0.0));
  });
}

// ------------------------------------------------------------ convolution

// Stride-1 2D convolution with symmetric zero padding.
// x [N, C, H, W], w [O, C, k, k], bias [O] -> [N, O, H', W'].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  const std::size_t K = C * k * k, P = Ho * Wo;
  // im2col for every sample: [N][K x P]
  auto cols = std::make_shared<std::vector<double>>(N * K * P, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* dst = cols->data() + n * K * P + ((c * k + ky) * k + kx) * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              dst[oy * Wo + ox] = x[((n * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
            }
          }
        }
  std::vector<double> out(N * O * P);
  const auto wm = detail::cmap(w.data().data(), O, K);
  for (std::size_t n = 0; n < N; ++n) {
    auto y = detail::mmap(out.data() + n * O * P, O, P);
    y.noalias() = wm * detail::cmap(cols->data() + n * K * P, K, P);
    if (bias.defined())
      y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), static_cast<Eigen::Index>(O));
  }
  return make_result("conv2d", {N, O, Ho, Wo}, std::move(out), {x, w, bias},
                     [x, w, bias, cols, N, C, H, W, O, k, pad, Ho, Wo, K, P](detail::Node& self) {
                       auto gx = grad_sink(x);
                       auto gw = grad_sink(w);
                       auto gb = grad_sink(bias);
                       std::vector<double> dcols(gx.empty() ? 0 : K * P);
                       for (std::size_t n = 0; n < N; ++n) {
                         const auto g = detail::cmap(self.grad.data() + n * O * P, O, P);
                         if (!gw.empty())
                           detail::mmap(gw.data(), O, K).noalias() +=
                               g * detail::cmap(cols->data() + n * K * P, K, P).transpose();
                         if (!gb.empty())
                           for (std::size_t o = 0; o < O; ++o)
                             for (std::size_t p = 0; p < P; ++p) gb[o] += self.grad[(n * O + o) * P + p];
                         if (gx.empty()) continue;
                         detail::mmap(dcols.data(), K, P).noalias() =
                             detail::cmap(w.data().data(), O, K).transpose() * g;
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t ky = 0; ky < k; ++ky)
                             for (std::size_t kx = 0; kx < k; ++kx) {
                               const double* src = dcols.data() + ((c * k + ky) * k + kx) * P;
                               for (std::size_t oy = 0; oy < Ho; ++oy) {
                                 const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
                                 if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                 for (std::size_t ox = 0; ox < Wo; ++ox) {
                                   const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
                                   if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                   gx[((n * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] +=
                                       src[oy * Wo + ox];
                                 }
                               }
                             }
                       }
                     });
}

// Non-overlapping k x k average pooling; H and W must be divisible by k.
inline Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4 || k == 0 || x.dim(2) % k || x.dim(3) % k)
    throw ShapeError("avg_pool2d: " + shape_str(x.shape()) + " not divisible by " + std::to_string(k));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(N * C * Ho * Wo, 0.0);
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(p * Ho + y / k) * Wo + xx / k] += x[(p * H + y) * W + xx] * inv;
  return make_result("avg_pool2d", {N, C, Ho, Wo}, std::move(out), {x}, [x, N, C, H, W, Ho, Wo, k, inv](detail::Node& self) {
    auto gx = grad_sink(x);
    for (std::size_t p = 0; p < N * C; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) gx[(p * H + y) * W + xx] += self.grad[(p * Ho + y / k) * Wo + xx / k] * inv;
  });
}

}  // namespace clipbench
