#pragma once

// Differentiable tensor operations. Every function computes its result
// eagerly and, when a tape is active and an input is tracked, records a
// closure that propagates output gradients back to the inputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "stgm/errors.hpp"
#include "stgm/fastmath.hpp"
#include "stgm/mac_counter.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Trailing shape `tail` must match the last axes of `full`; returns the number
// of leading repetitions.
inline std::size_t leading_count(const Shape& full, const Shape& tail, const char* op) {
  if (tail.size() > full.size() ||
      !std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()))) {
    throw DimensionError(std::string(op) + ": " + shape_str(tail) + " is not a trailing shape of " +
                         shape_str(full));
  }
  return shape_numel(full) / std::max<std::size_t>(shape_numel(tail), 1);
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Logistic over an array through the vectorized exponential of -|x|.
inline void sigmoid_array(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = -std::abs(x[i]);
  exp_inplace(out, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = out[i];
    const double pos = 1.0 / (1.0 + e);
    out[i] = x[i] >= 0 ? pos : e * pos;
  }
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Calls f with the width as a compile-time constant for the small widths the
// model uses, so inner loops over channels unroll; f(n) otherwise.
template <class F>
void with_width(std::size_t n, F&& f) {
  switch (n) {
    case 1: return f(std::integral_constant<std::size_t, 1>{});
    case 2: return f(std::integral_constant<std::size_t, 2>{});
    case 4: return f(std::integral_constant<std::size_t, 4>{});
    case 8: return f(std::integral_constant<std::size_t, 8>{});
    case 16: return f(std::integral_constant<std::size_t, 16>{});
    default: return f(n);
  }
}

// out[c] = sum_j a[j] * m[j * w + c] for a row-major [n, w] matrix m. Four
// columns at a time in local accumulators, which the compiler keeps in one
// vector register; j runs in order, so results match the naive loop.
inline void vec_mat(const double* a, const double* m, std::size_t n, std::size_t w, double* out) {
  std::size_t c = 0;
  for (; c + 4 <= w; c += 4) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double aj = a[j];
      const double* mj = m + j * w + c;
      s0 += aj * mj[0];
      s1 += aj * mj[1];
      s2 += aj * mj[2];
      s3 += aj * mj[3];
    }
    out[c] = s0;
    out[c + 1] = s1;
    out[c + 2] = s2;
    out[c + 3] = s3;
  }
  for (; c + 2 <= w; c += 2) {
    double s0 = 0, s1 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      s0 += a[j] * m[j * w + c];
      s1 += a[j] * m[j * w + c + 1];
    }
    out[c] = s0;
    out[c + 1] = s1;
  }
  for (; c < w; ++c) {
    double s0 = 0;
    for (std::size_t j = 0; j < n; ++j) s0 += a[j] * m[j * w + c];
    out[c] = s0;
  }
}

inline void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Elementwise map whose derivative is expressed through input and output.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  Tensor out(x.shape());
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(xv[i]);
  return record_op(out, {&x}, [x, out, df](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    const auto xv = x.values();
    const auto yv = out.values();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out = x;
  out.shape_ = std::move(shape);
  out.node_ = -1;
  out.tape_serial_ = 0;
  return record_op(out, {&x}, [](std::span<const double> g, GradRefs& gr) {
    detail::accumulate(gr[0], g);
  });
}

// Drops `axis`, keeping the slice at `index`.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank() || index >= x.dim(axis)) {
    throw DimensionError("select: axis/index out of range for " + shape_str(x.shape()));
  }
  const auto sp = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(shape);
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t a = 0; a < sp.outer; ++a) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((a * sp.extent + index) * sp.inner), sp.inner,
                o.begin() + static_cast<std::ptrdiff_t>(a * sp.inner));
  }
  return record_op(out, {&x}, [sp, index](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (std::size_t a = 0; a < sp.outer; ++a) {
      for (std::size_t c = 0; c < sp.inner; ++c) {
        gx[(a * sp.extent + index) * sp.inner + c] += g[a * sp.inner + c];
      }
    }
  });
}

// Contiguous range [start, start + len) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis)) {
    throw DimensionError("slice: range out of bounds for " + shape_str(x.shape()));
  }
  const auto sp = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = len;
  Tensor out(shape);
  auto o = out.mutable_values();
  const auto xv = x.values();
  const std::size_t block = len * sp.inner;
  for (std::size_t a = 0; a < sp.outer; ++a) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((a * sp.extent + start) * sp.inner), block,
                o.begin() + static_cast<std::ptrdiff_t>(a * block));
  }
  return record_op(out, {&x}, [sp, start, block](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (std::size_t a = 0; a < sp.outer; ++a) {
      for (std::size_t c = 0; c < block; ++c) gx[(a * sp.extent + start) * sp.inner + c] += g[a * block + c];
    }
  });
}

// Stacks equally shaped tensors along a new axis.
inline Tensor stack(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("stack: no tensors");
  const Shape& base = xs.front().shape();
  if (axis > base.size()) throw DimensionError("stack: axis out of range");
  for (const auto& t : xs) detail::require_same_shape(t, xs.front(), "stack");
  Shape shape = base;
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), xs.size());
  const auto sp = detail::split_at(shape, axis);
  Tensor out(shape);
  auto o = out.mutable_values();
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto xv = xs[k].values();
    for (std::size_t a = 0; a < sp.outer; ++a) {
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(a * sp.inner), sp.inner,
                  o.begin() + static_cast<std::ptrdiff_t>((a * sp.extent + k) * sp.inner));
    }
  }
  std::vector<const Tensor*> inputs;
  inputs.reserve(xs.size());
  for (const auto& t : xs) inputs.push_back(&t);
  return record_op(out, inputs, [sp](std::span<const double> g, GradRefs& gr) {
    for (std::size_t k = 0; k < sp.extent; ++k) {
      if (!gr.has(k)) continue;
      auto gx = gr[k];
      for (std::size_t a = 0; a < sp.outer; ++a) {
        for (std::size_t c = 0; c < sp.inner; ++c) gx[a * sp.inner + c] += g[(a * sp.extent + k) * sp.inner + c];
      }
    }
  });
}

// Concatenation along the last axis.
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_last: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t na = a.shape().back();
  const std::size_t nb = b.shape().back();
  const std::size_t rows = na ? a.numel() / na : b.numel() / std::max<std::size_t>(nb, 1);
  Shape shape = a.shape();
  shape.back() = na + nb;
  Tensor out(shape);
  auto o = out.mutable_values();
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(r * na), na,
                o.begin() + static_cast<std::ptrdiff_t>(r * (na + nb)));
    std::copy_n(bv.begin() + static_cast<std::ptrdiff_t>(r * nb), nb,
                o.begin() + static_cast<std::ptrdiff_t>(r * (na + nb) + na));
  }
  return record_op(out, {&a, &b}, [rows, na, nb](std::span<const double> g, GradRefs& gr) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (gr.has(0)) {
        for (std::size_t c = 0; c < na; ++c) gr[0][r * na + c] += g[r * (na + nb) + c];
      }
      if (gr.has(1)) {
        for (std::size_t c = 0; c < nb; ++c) gr[1][r * nb + c] += g[r * (na + nb) + na + c];
      }
    }
  });
}

// General axis permutation: out axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ContractError("permute: not a permutation");
    seen[p] = true;
  }
  Shape shape(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  for (std::size_t i = 0; i < r; ++i) shape[i] = x.dim(perm[i]);
  // map[out_flat] = in_flat
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t f = 0; f < n; ++f) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    map[f] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(shape);
  auto o = out.mutable_values();
  const auto xv = x.values();
  for (std::size_t f = 0; f < n; ++f) o[f] = xv[map[f]];
  return record_op(out, {&x}, [map = std::move(map)](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (std::size_t f = 0; f < map.size(); ++f) gx[map[f]] += g[f];
  });
}

// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
  std::vector<std::size_t> perm(x.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

// ---------------------------------------------------------------------------
// Contractions

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  auto o = out.mutable_values();
  const double* A = a.data();
  const double* B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] += av * B[p * n + j];
    }
  }
  MacCounter::add(m * k * n);
  return record_op(out, {&a, &b}, [a, b, m, k, n](std::span<const double> g, GradRefs& gr) {
    const double* A = a.data();
    const double* B = b.data();
    if (gr.has(0)) {
      auto ga = gr[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (gr.has(1)) {
      auto gb = gr[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

// x[..., in] * w[in, out] (+ bias[out]) applied to every leading row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
  detail::require_rank(w, 2, "linear");
  if (x.rank() == 0 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), outd = w.dim(1);
  if (bias && bias->shape() != Shape{outd}) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " for width " + std::to_string(outd));
  }
  const std::size_t rows = in ? x.numel() / in : 0;
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor out(shape);
  auto o = out.mutable_values();
  const double* X = x.data();
  const double* W = w.data();
  detail::with_width(outd, [&](auto width) {
    if constexpr (std::is_same_v<decltype(width), std::size_t>) {
      for (std::size_t r = 0; r < rows; ++r) detail::vec_mat(X + r * in, W, in, outd, o.data() + r * outd);
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        std::array<double, decltype(width)::value> acc{};
        for (std::size_t p = 0; p < in; ++p) {
          const double xv = X[r * in + p];
          const double* wrow = W + p * outd;
          for (std::size_t j = 0; j < width; ++j) acc[j] += xv * wrow[j];
        }
        std::copy(acc.begin(), acc.end(), o.data() + r * outd);
      }
    }
  });
  if (bias)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outd; ++j) o[r * outd + j] += (*bias)[j];
  MacCounter::add(rows * in * outd);
  Tensor bias_t = bias ? *bias : Tensor();
  const bool has_bias = bias != nullptr;
  return record_op(out, {&x, &w, &bias_t},
                   [x, w, rows, in, outd, has_bias](std::span<const double> g, GradRefs& gr) {
                     const double* X = x.data();
                     const double* W = w.data();
                     detail::with_width(outd, [&](auto width) {
                       if (gr.has(0)) {
                         auto gx = gr[0];
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t p = 0; p < in; ++p) {
                             double s = 0;
                             const double* wrow = W + p * outd;
                             const double* grow = g.data() + r * outd;
                             for (std::size_t j = 0; j < width; ++j) s += grow[j] * wrow[j];
                             gx[r * in + p] += s;
                           }
                       }
                     });
                     if (gr.has(1)) {
                       // gw[p] = sum_r x[r, p] g[r], one input column at a time.
                       auto gw = gr[1];
                       std::vector<double> col(rows), acc(outd);
                       for (std::size_t p = 0; p < in; ++p) {
                         for (std::size_t r = 0; r < rows; ++r) col[r] = X[r * in + p];
                         detail::vec_mat(col.data(), g.data(), rows, outd, acc.data());
                         for (std::size_t j = 0; j < outd; ++j) gw[p * outd + j] += acc[j];
                       }
                     }
                     if (has_bias && gr.has(2)) {
                       auto gb = gr[2];
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
                     }
                   });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return linear(x, w, &bias); }

// Batched matrix product a[B, m, k] * b[B, k, n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) {
    throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({bs, m, n});
  auto o = out.mutable_values();
  const double* A = a.data();
  const double* B = b.data();
  for (std::size_t s = 0; s < bs; ++s) {
    const double* As = A + s * m * k;
    const double* Bs = B + s * k * n;
    double* Os = o.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = As[i * k + p];
        for (std::size_t j = 0; j < n; ++j) Os[i * n + j] += av * Bs[p * n + j];
      }
  }
  MacCounter::add(bs * m * k * n);
  return record_op(out, {&a, &b}, [a, b, bs, m, k, n](std::span<const double> g, GradRefs& gr) {
    for (std::size_t s = 0; s < bs; ++s) {
      const double* As = a.data() + s * m * k;
      const double* Bs = b.data() + s * k * n;
      const double* Gs = g.data() + s * m * n;
      if (gr.has(0)) {
        double* ga = gr[0].data() + s * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += Gs[i * n + j] * Bs[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (gr.has(1)) {
        double* gb = gr[1].data() + s * k * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = As[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * Gs[i * n + j];
          }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  return record_op(out, {&a, &b}, [](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) detail::accumulate(gr[0], g);
    if (gr.has(1)) detail::accumulate(gr[1], g);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  return record_op(out, {&a, &b}, [](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) detail::accumulate(gr[0], g);
    if (gr.has(1)) {
      auto gb = gr[1];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  return record_op(out, {&a, &b}, [a, b](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) {
      auto ga = gr[0];
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (gr.has(1)) {
      auto gb = gr[1];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
}

// x + b where b matches the trailing axes of x.
inline Tensor add_trailing(const Tensor& x, const Tensor& b) {
  const std::size_t reps = detail::leading_count(x.shape(), b.shape(), "add_trailing");
  const std::size_t n = b.numel();
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = x[r * n + j] + b[j];
  return record_op(out, {&x, &b}, [reps, n](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) detail::accumulate(gr[0], g);
    if (gr.has(1)) {
      auto gb = gr[1];
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

// x * w where w matches the trailing axes of x.
inline Tensor mul_trailing(const Tensor& x, const Tensor& w) {
  const std::size_t reps = detail::leading_count(x.shape(), w.shape(), "mul_trailing");
  const std::size_t n = w.numel();
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = x[r * n + j] * w[j];
  return record_op(out, {&x, &w}, [x, w, reps, n](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) {
      auto gx = gr[0];
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] * w[j];
    }
    if (gr.has(1)) {
      auto gw = gr[1];
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < n; ++j) gw[j] += g[r * n + j] * x[r * n + j];
    }
  });
}

// x[..., m] with each trailing row scaled by s[...]; s holds one entry per row.
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() == 0 || x.numel() != s.numel() * x.shape().back()) {
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " does not index the rows of " + shape_str(x.shape()));
  }
  const std::size_t rows = s.numel(), m = x.shape().back();
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) o[r * m + j] = x[r * m + j] * s[r];
  return record_op(out, {&x, &s}, [x, s, rows, m](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) {
      auto gx = gr[0];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += g[r * m + j] * s[r];
    }
    if (gr.has(1)) {
      auto gs = gr[1];
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0;
        for (std::size_t j = 0; j < m; ++j) acc += g[r * m + j] * x[r * m + j];
        gs[r] += acc;
      }
    }
  });
}

// x * s for a one-element tensor s.
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must hold one value");
  const double sv = s[0];
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * sv;
  return record_op(out, {&x, &s}, [x, sv](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) {
      auto gx = gr[0];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * sv;
    }
    if (gr.has(1)) {
      double acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      gr[1][0] += acc;
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Activations

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  detail::sigmoid_array(x.data(), out.mutable_values().data(), x.numel());
  return record_op(out, {&x}, [out](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    const double* y = out.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, [](double v) { return detail::softplus(v); },
                       [](double v, double) { return detail::sigmoid(v); });
}

// x * sigmoid(x)
inline Tensor silu(const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<double> sig(n);
  detail::sigmoid_array(x.data(), sig.data(), n);
  Tensor out(x.shape());
  double* o = out.mutable_values().data();
  for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * sig[i];
  return record_op(out, {&x}, [x, sig = std::move(sig)](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * sig[i] * (1.0 + x[i] * (1.0 - sig[i]));
  });
}

// ---------------------------------------------------------------------------
// Normalization

// Standardizes the last axis and applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = kLayerNormEps) {
  if (eps <= 0) throw DomainError("layer_norm: eps must be positive");
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm: empty normalized axis");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine params must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      o[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  return record_op(out, {&x, &gamma, &beta},
                   [gamma, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](
                       std::span<const double> g, GradRefs& gr) {
                     std::vector<double> dxh(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* gr_row = g.data() + r * d;
                       const double* xh = xhat.data() + r * d;
                       if (gr.has(1)) {
                         for (std::size_t j = 0; j < d; ++j) gr[1][j] += gr_row[j] * xh[j];
                       }
                       if (gr.has(2)) {
                         for (std::size_t j = 0; j < d; ++j) gr[2][j] += gr_row[j];
                       }
                       if (gr.has(0)) {
                         double m1 = 0, m2 = 0;
                         for (std::size_t j = 0; j < d; ++j) {
                           dxh[j] = gr_row[j] * gamma[j];
                           m1 += dxh[j];
                           m2 += dxh[j] * xh[j];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) gr[0][r * d + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                       }
                     }
                   });
}

// Softmax over the last axis with per-row max subtraction.
inline Tensor row_softmax(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("row_softmax: empty row axis");
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    double* orow = o.data() + r * m;
    const double mx = *std::max_element(xr, xr + m);
    for (std::size_t j = 0; j < m; ++j) orow[j] = xr[j] - mx;
  }
  detail::exp_inplace(o.data(), o.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = o.data() + r * m;
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) s += orow[j];
    for (std::size_t j = 0; j < m; ++j) orow[j] /= s;
  }
  return record_op(out, {&x}, [out, rows, m](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = out.data() + r * m;
      double dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[j];
      for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += y[j] * (g[r * m + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.values()) s += v;
  return record_op(Tensor::scalar(s), {&x}, [](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (auto& v : gx) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean of squared differences over all elements.
inline Tensor mse_loss(const Tensor& pred, const Tensor& truth) {
  detail::require_same_shape(pred, truth, "mse_loss");
  if (pred.numel() == 0) throw ContractError("mse_loss: empty tensors");
  const double n = static_cast<double>(pred.numel());
  double s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return record_op(Tensor::scalar(s / n), {&pred, &truth},
                   [pred, truth, n](std::span<const double> g, GradRefs& gr) {
                     for (std::size_t i = 0; i < pred.numel(); ++i) {
                       const double d = 2.0 * (pred[i] - truth[i]) / n * g[0];
                       if (gr.has(0)) gr[0][i] += d;
                       if (gr.has(1)) gr[1][i] -= d;
                     }
                   });
}

}  // namespace stgm
