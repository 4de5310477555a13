#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dmpo/kernels.hpp"
#include "dmpo/tensor.hpp"

namespace dmpo {

namespace detail {

constexpr std::int64_t kParGrain = 32768;

template <typename F>
inline void par_elems(std::int64_t n, F&& fn) {
  if (n < kParGrain) {
    fn(0, n);
    return;
  }
  parallel_for(n, kParGrain, fn);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " differ");
}

inline void axpy(std::vector<double>& dst, const std::vector<double>& src) {
  par_elems(static_cast<std::int64_t>(dst.size()), [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) dst[static_cast<std::size_t>(i)] += src[static_cast<std::size_t>(i)];
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t n = a.numel();
  detail::par_elems(n, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) po[i] = pa[i] + pb[i];
  });
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(on, {an, bn}, [an, bn, on] {
      if (an->requires_grad) detail::axpy(an->grad, on->grad);
      if (bn->requires_grad) detail::axpy(bn->grad, on->grad);
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(on, {an, bn}, [an, bn, on] {
      if (an->requires_grad) detail::axpy(an->grad, on->grad);
      if (bn->requires_grad)
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t n = a.numel();
  detail::par_elems(n, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) po[i] = pa[i] * pb[i];
  });
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(on, {an, bn}, [an, bn, on] {
      const auto& g = on->grad;
      const std::int64_t n2 = static_cast<std::int64_t>(g.size());
      if (an->requires_grad)
        detail::par_elems(n2, [&](std::int64_t i0, std::int64_t i1) {
          for (std::int64_t i = i0; i < i1; ++i)
            an->grad[static_cast<std::size_t>(i)] += bn->value[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
        });
      if (bn->requires_grad)
        detail::par_elems(n2, [&](std::int64_t i0, std::int64_t i1) {
          for (std::int64_t i = i0; i < i1; ++i)
            bn->grad[static_cast<std::size_t>(i)] += an->value[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
        });
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::int64_t n = a.numel();
  detail::par_elems(n, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) po[i] = c * pa[i];
  });
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape::active()->record(on, {an}, [an, on, c] {
      if (!an->requires_grad) return;
      detail::par_elems(static_cast<std::int64_t>(an->grad.size()), [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i)
          an->grad[static_cast<std::size_t>(i)] += c * on->grad[static_cast<std::size_t>(i)];
      });
    });
  }
  return out;
}

// out = s * a where s is a learnable scalar tensor (shape [1]).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimError("scale_by: scale must be a scalar, got " + shape_str(s.shape()));
  Tensor out = Tensor::uninitialized(a.shape());
  const double sv = s.data()[0];
  const double* pa = a.data();
  double* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = sv * pa[i];
  if (detail::tracing({&a, &s})) {
    out.set_requires_grad(true);
    auto an = a.node(), sn = s.node(), on = out.node();
    Tape::active()->record(on, {an, sn}, [an, sn, on] {
      const auto& g = on->grad;
      const double sv2 = sn->value[0];
      if (an->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += sv2 * g[i];
      if (sn->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += an->value[i] * g[i];
        sn->grad[0] += acc;
      }
    });
  }
  return out;
}

// x + y where y's shape is a suffix of x's shape (bias vectors, positional
// tables). Gradient of y sums over the leading dimensions.
inline Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (ys.size() > xs.size() ||
      !std::equal(ys.begin(), ys.end(), xs.end() - static_cast<std::ptrdiff_t>(ys.size())))
    throw DimError("add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const std::int64_t m = y.numel();
  const std::int64_t reps = x.numel() / m;
  Tensor out = Tensor::uninitialized(xs);
  const double* px = x.data();
  const double* py = y.data();
  double* po = out.data();
  detail::par_elems(reps, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r)
      for (std::int64_t i = 0; i < m; ++i) po[r * m + i] = px[r * m + i] + py[i];
  });
  if (detail::tracing({&x, &y})) {
    out.set_requires_grad(true);
    auto xn = x.node(), yn = y.node(), on = out.node();
    Tape::active()->record(on, {xn, yn}, [xn, yn, on, reps, m] {
      const auto& g = on->grad;
      if (xn->requires_grad) detail::axpy(xn->grad, g);
      if (yn->requires_grad) {
        for (std::int64_t r = 0; r < reps; ++r)
          for (std::int64_t i = 0; i < m; ++i) yn->grad[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(r * m + i)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// Strict 2-D product: [m,k] x [k,n] -> [m,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::uninitialized({m, n});
  kernels::gemm_nn_par(a.data(), b.data(), out.data(), m, k, n);
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(on, {an, bn}, [an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->requires_grad)
        kernels::gemm_nt_acc_par(g, bn->value.data(), an->grad.data(), m, n, k);
      if (bn->requires_grad)
        kernels::gemm_tn_acc_par(an->value.data(), g, bn->grad.data(), k, m, n);
    });
  }
  return out;
}

// x[..., k] times w[k, n] -> [..., n]; leading dimensions are flattened
// internally so no reshape nodes are needed around dense layers.
inline Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0))
    throw DimError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                   shape_str(w.shape()));
  const std::int64_t k = w.dim(0), n = w.dim(1);
  const std::int64_t rows = x.numel() / k;
  Shape os = x.shape();
  os.back() = n;
  Tensor out = Tensor::uninitialized(os);
  kernels::gemm_nn_par(x.data(), w.data(), out.data(), rows, k, n);
  if (detail::tracing({&x, &w})) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), on = out.node();
    Tape::active()->record(on, {xn, wn}, [xn, wn, on, rows, k, n] {
      const double* g = on->grad.data();
      if (xn->requires_grad)
        kernels::gemm_nt_acc_par(g, wn->value.data(), xn->grad.data(), rows, n, k);
      if (wn->requires_grad)
        kernels::gemm_tn_acc_par(xn->value.data(), g, wn->grad.data(), k, rows, n);
    });
  }
  return out;
}

// Batched product over matching leading batch dimension:
//   a [G,m,k] x b [G,k,n] -> [G,m,n]            (trans_b = false)
//   a [G,m,k] x b [G,n,k]^T per slice -> [G,m,n] (trans_b = true)
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw DimError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
  const std::int64_t G = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::int64_t n = trans_b ? b.dim(1) : b.dim(2);
  if ((trans_b ? b.dim(2) : b.dim(1)) != k)
    throw DimError("bmm: inner extents of " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " differ");
  Tensor out = Tensor::uninitialized({G, m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t bs = b.dim(1) * b.dim(2);
  parallel_for(G, 8, [&](std::int64_t g0, std::int64_t g1) {
    for (std::int64_t g = g0; g < g1; ++g) {
      if (trans_b)
        kernels::gemm_nt(pa + g * m * k, pb + g * bs, po + g * m * n, m, k, n);
      else
        kernels::gemm_nn(pa + g * m * k, pb + g * bs, po + g * m * n, m, k, n);
    }
  });
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(on, {an, bn}, [an, bn, on, G, m, k, n, bs, trans_b] {
      const double* g = on->grad.data();
      const double* av = an->value.data();
      const double* bv = bn->value.data();
      double* ga = an->requires_grad ? an->grad.data() : nullptr;
      double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
      parallel_for(G, 8, [&](std::int64_t s0, std::int64_t s1) {
        for (std::int64_t s = s0; s < s1; ++s) {
          const double* gs = g + s * m * n;
          if (trans_b) {
            // C = A * B^T: dA += dC * B, dB += dC^T * A
            if (ga) kernels::gemm_nn(gs, bv + s * bs, ga + s * m * k, m, n, k, true);
            if (gb) kernels::gemm_tn(gs, av + s * m * k, gb + s * bs, n, m, k, true);
          } else {
            // C = A * B: dA += dC * B^T, dB += A^T * dC
            if (ga) kernels::gemm_nt(gs, bv + s * bs, ga + s * m * k, m, n, k, true);
            if (gb) kernels::gemm_tn(av + s * m * k, gs, gb + s * bs, k, m, n, true);
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out = Tensor::uninitialized(std::move(shape));
  std::copy_n(x.data(), x.numel(), out.data());
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on] {
      if (xn->requires_grad) detail::axpy(xn->grad, on->grad);
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw DimError("permute: axes rank mismatch");
  const Shape& xs = x.shape();
  Shape os(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<std::size_t>(i)] = xs[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  std::vector<std::int64_t> xstride(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) xstride[static_cast<std::size_t>(i)] = xstride[static_cast<std::size_t>(i + 1)] * xs[static_cast<std::size_t>(i + 1)];
  std::vector<std::int64_t> gather(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) gather[static_cast<std::size_t>(i)] = xstride[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  const std::int64_t n = x.numel();
  Tensor out = Tensor::uninitialized(os);
  const double* px = x.data();
  double* po = out.data();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t src = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    po[flat] = px[src];
    for (int d = r - 1; d >= 0; --d) {
      idx[static_cast<std::size_t>(d)]++;
      src += gather[static_cast<std::size_t>(d)];
      if (idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
      src -= gather[static_cast<std::size_t>(d)] * os[static_cast<std::size_t>(d)];
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, gather, os, r] {
      if (!xn->requires_grad) return;
      const auto& g = on->grad;
      std::vector<std::int64_t> idx2(static_cast<std::size_t>(r), 0);
      std::int64_t src = 0;
      const std::int64_t n2 = static_cast<std::int64_t>(g.size());
      for (std::int64_t flat = 0; flat < n2; ++flat) {
        xn->grad[static_cast<std::size_t>(src)] += g[static_cast<std::size_t>(flat)];
        for (int d = r - 1; d >= 0; --d) {
          idx2[static_cast<std::size_t>(d)]++;
          src += gather[static_cast<std::size_t>(d)];
          if (idx2[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
          src -= gather[static_cast<std::size_t>(d)] * os[static_cast<std::size_t>(d)];
          idx2[static_cast<std::size_t>(d)] = 0;
        }
      }
    });
  }
  return out;
}

// [B,T,D] -> [B*H, T, D/H]: per-head views for batched attention products,
// fused so the round trip costs one copy each way instead of a
// reshape/permute/reshape chain.
inline Tensor split_heads(const Tensor& x, std::int64_t heads) {
  if (x.rank() != 3 || x.dim(2) % heads != 0)
    throw DimError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                   std::to_string(heads) + " heads");
  const std::int64_t B = x.dim(0), T = x.dim(1), D = x.dim(2), dh = D / heads;
  Tensor out = Tensor::uninitialized({B * heads, T, dh});
  const double* px = x.data();
  double* po = out.data();
  parallel_for(B * heads, 4, [&](std::int64_t g0, std::int64_t g1) {
    for (std::int64_t g = g0; g < g1; ++g) {
      const std::int64_t b = g / heads, h = g % heads;
      for (std::int64_t t = 0; t < T; ++t)
        std::copy_n(px + (b * T + t) * D + h * dh, dh, po + (g * T + t) * dh);
    }
  });
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, B, T, D, dh, heads] {
      if (!xn->requires_grad) return;
      const double* g = on->grad.data();
      double* gx = xn->grad.data();
      parallel_for(B * heads, 4, [&](std::int64_t g0, std::int64_t g1) {
        for (std::int64_t gg = g0; gg < g1; ++gg) {
          const std::int64_t b = gg / heads, h = gg % heads;
          for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t d = 0; d < dh; ++d)
              gx[(b * T + t) * D + h * dh + d] += g[(gg * T + t) * dh + d];
        }
      });
    });
  }
  return out;
}

// Inverse of split_heads: [B*H, T, dh] -> [B, T, H*dh]
inline Tensor merge_heads(const Tensor& x, std::int64_t heads) {
  if (x.rank() != 3 || x.dim(0) % heads != 0)
    throw DimError("merge_heads: cannot merge " + shape_str(x.shape()) + " from " +
                   std::to_string(heads) + " heads");
  const std::int64_t B = x.dim(0) / heads, T = x.dim(1), dh = x.dim(2), D = heads * dh;
  Tensor out = Tensor::uninitialized({B, T, D});
  const double* px = x.data();
  double* po = out.data();
  parallel_for(B * heads, 4, [&](std::int64_t g0, std::int64_t g1) {
    for (std::int64_t g = g0; g < g1; ++g) {
      const std::int64_t b = g / heads, h = g % heads;
      for (std::int64_t t = 0; t < T; ++t)
        std::copy_n(px + (g * T + t) * dh, dh, po + (b * T + t) * D + h * dh);
    }
  });
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, B, T, D, dh, heads] {
      if (!xn->requires_grad) return;
      const double* g = on->grad.data();
      double* gx = xn->grad.data();
      parallel_for(B * heads, 4, [&](std::int64_t g0, std::int64_t g1) {
        for (std::int64_t gg = g0; gg < g1; ++gg) {
          const std::int64_t b = gg / heads, h = gg % heads;
          for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t d = 0; d < dh; ++d)
              gx[(gg * T + t) * dh + d] += g[(b * T + t) * D + h * dh + d];
        }
      });
    });
  }
  return out;
}

// tokens[b, lo:hi, :] -> [B, hi-lo, D]
inline Tensor slice_tokens(const Tensor& x, std::int64_t lo, std::int64_t hi) {
  if (x.rank() != 3 || lo < 0 || hi > x.dim(1) || lo >= hi)
    throw DimError("slice_tokens: bad range [" + std::to_string(lo) + "," + std::to_string(hi) +
                   ") for " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  const std::int64_t M = hi - lo;
  Tensor out = Tensor::uninitialized({B, M, D});
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    std::copy_n(px + (b * T + lo) * D, M * D, po + b * M * D);
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, B, T, D, lo, M] {
      if (!xn->requires_grad) return;
      const auto& g = on->grad;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < M * D; ++i)
          xn->grad[static_cast<std::size_t>((b * T + lo) * D + i)] += g[static_cast<std::size_t>(b * M * D + i)];
    });
  }
  return out;
}

// tokens[b, t, :] -> [B, D]
inline Tensor take_token(const Tensor& x, std::int64_t t) {
  if (x.rank() != 3 || t < 0 || t >= x.dim(1))
    throw DimError("take_token: index " + std::to_string(t) + " out of range for " +
                   shape_str(x.shape()));
  const std::int64_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  Tensor out = Tensor::uninitialized({B, D});
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t b = 0; b < B; ++b) std::copy_n(px + (b * T + t) * D, D, po + b * D);
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, B, T, D, t] {
      if (!xn->requires_grad) return;
      const auto& g = on->grad;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t d = 0; d < D; ++d)
          xn->grad[static_cast<std::size_t>((b * T + t) * D + d)] += g[static_cast<std::size_t>(b * D + d)];
    });
  }
  return out;
}

// Prepend a learned token (e.g. the classification token) to every sample.
inline Tensor prepend_token(const Tensor& tok, const Tensor& x) {
  if (tok.rank() != 1 || x.rank() != 3 || tok.dim(0) != x.dim(2))
    throw DimError("prepend_token: shapes " + shape_str(tok.shape()) + " and " +
                   shape_str(x.shape()) + " incompatible");
  const std::int64_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  Tensor out = Tensor::uninitialized({B, T + 1, D});
  const double* pt = tok.data();
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t b = 0; b < B; ++b) {
    std::copy_n(pt, D, po + b * (T + 1) * D);
    std::copy_n(px + b * T * D, T * D, po + b * (T + 1) * D + D);
  }
  if (detail::tracing({&tok, &x})) {
    out.set_requires_grad(true);
    auto tn = tok.node(), xn = x.node(), on = out.node();
    Tape::active()->record(on, {tn, xn}, [tn, xn, on, B, T, D] {
      const auto& g = on->grad;
      if (tn->requires_grad)
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t d = 0; d < D; ++d) tn->grad[static_cast<std::size_t>(d)] += g[static_cast<std::size_t>(b * (T + 1) * D + d)];
      if (xn->requires_grad)
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < T * D; ++i)
            xn->grad[static_cast<std::size_t>(b * T * D + i)] += g[static_cast<std::size_t>(b * (T + 1) * D + D + i)];
    });
  }
  return out;
}

// x[..., lo:hi] over the last axis.
inline Tensor slice_last(const Tensor& x, std::int64_t lo, std::int64_t hi) {
  const std::int64_t D = x.shape().back();
  if (lo < 0 || hi > D || lo >= hi)
    throw DimError("slice_last: bad range [" + std::to_string(lo) + "," + std::to_string(hi) +
                   ") for " + shape_str(x.shape()));
  const std::int64_t rows = x.numel() / D;
  const std::int64_t M = hi - lo;
  Shape os = x.shape();
  os.back() = M;
  Tensor out = Tensor::uninitialized(os);
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) std::copy_n(px + r * D + lo, M, po + r * M);
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, rows, D, lo, M] {
      if (!xn->requires_grad) return;
      const auto& g = on->grad;
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < M; ++i)
          xn->grad[static_cast<std::size_t>(r * D + lo + i)] += g[static_cast<std::size_t>(r * M + i)];
    });
  }
  return out;
}

// Concatenate along the last axis; all inputs share leading extents.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    std::int64_t last = l.back();
    l.pop_back();
    if (l != lead) throw DimError("concat_last: leading extents differ");
    total += last;
  }
  const std::int64_t rows = shape_numel(lead);
  Shape os = lead;
  os.push_back(total);
  Tensor out = Tensor::uninitialized(os);
  double* po = out.data();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.shape().back();
    const double* pp = p.data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(pp + r * w, w, po + r * total + off);
    off += w;
  }
  bool trace = false;
  for (const auto& p : parts)
    if (p.requires_grad()) trace = true;
  if (trace && Tape::active()) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape::active()->record(on, nodes, [nodes, on, rows, total] {
      const auto& g = on->grad;
      std::int64_t off2 = 0;
      for (auto& pn : nodes) {
        const std::int64_t w = pn->shape.back();
        if (pn->requires_grad)
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < w; ++i)
              pn->grad[static_cast<std::size_t>(r * w + i)] += g[static_cast<std::size_t>(r * total + off2 + i)];
        off2 += w;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

// Logistic-gate form x * sigmoid(1.702 x); the gate values are cached so the
// backward pass needs no transcendental calls.
inline Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::uninitialized(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const std::int64_t n = x.numel();
  const bool trace = detail::tracing({&x});
  auto gate = trace ? std::make_shared<std::vector<double>>(
                          BufferPool::instance().acquire(static_cast<std::size_t>(n)))
                    : nullptr;
  double* pg = gate ? gate->data() : nullptr;
  constexpr double k = 1.702;
  detail::par_elems(n, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const double z = k * px[i];
      const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      po[i] = px[i] * s;
      if (pg) pg[i] = s;
    }
  });
  if (trace) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, gate] {
      if (!xn->requires_grad) return;
      const auto& g = on->grad;
      const double* ps = gate->data();
      constexpr double k2 = 1.702;
      detail::par_elems(static_cast<std::int64_t>(g.size()), [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
          const double s = ps[i];
          const double v = xn->value[static_cast<std::size_t>(i)];
          xn->grad[static_cast<std::size_t>(i)] += (s + k2 * v * s * (1.0 - s)) * g[static_cast<std::size_t>(i)];
        }
      });
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::uninitialized(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i)
    po[i] = px[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-px[i]))
                         : std::exp(px[i]) / (1.0 + std::exp(px[i]));
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on] {
      if (!xn->requires_grad) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double y = on->value[i];
        xn->grad[i] += y * (1.0 - y) * on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor tanh_act(const Tensor& x) {
  Tensor out = Tensor::uninitialized(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on] {
      if (!xn->requires_grad) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double y = on->value[i];
        xn->grad[i] += (1.0 - y * y) * on->grad[i];
      }
    });
  }
  return out;
}

// Row softmax over the last axis with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1)
    throw DimError("softmax_rows: need at least one column, got " + shape_str(x.shape()));
  const std::int64_t K = x.shape().back();
  const std::int64_t rows = x.numel() / K;
  Tensor out = Tensor::uninitialized(x.shape());
  const double* px = x.data();
  double* po = out.data();
  parallel_for(rows, 256, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const double* xr = px + r * K;
      double* yr = po + r * K;
      double mx = xr[0];
      for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, xr[j]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < K; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      }
      const double inv = 1.0 / sum;
      for (std::int64_t j = 0; j < K; ++j) yr[j] *= inv;
    }
  });
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, rows, K] {
      if (!xn->requires_grad) return;
      const double* y = on->value.data();
      const double* g = on->grad.data();
      double* gx = xn->grad.data();
      parallel_for(rows, 256, [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
          const double* yr = y + r * K;
          const double* gr = g + r * K;
          double dot = 0.0;
          for (std::int64_t j = 0; j < K; ++j) dot += yr[j] * gr[j];
          double* gxr = gx + r * K;
          for (std::int64_t j = 0; j < K; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
      });
    });
  }
  return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw ConfigError("layer_norm eps must be positive");
  const std::int64_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D)
    throw DimError("layer_norm: affine parameters must have length " + std::to_string(D));
  const std::int64_t rows = x.numel() / D;
  Tensor out = Tensor::uninitialized(x.shape());
  // cached row statistics for backward: inv std and normalized values
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  double* ph = xhat->data();
  double* pis = inv_std->data();
  parallel_for(rows, 64, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const double* xr = px + r * D;
      double mean = 0.0;
      for (std::int64_t j = 0; j < D; ++j) mean += xr[j];
      mean /= static_cast<double>(D);
      double var = 0.0;
      for (std::int64_t j = 0; j < D; ++j) {
        const double d = xr[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(D);
      const double is = 1.0 / std::sqrt(var + eps);
      pis[r] = is;
      double* hr = ph + r * D;
      double* yr = po + r * D;
      for (std::int64_t j = 0; j < D; ++j) {
        hr[j] = (xr[j] - mean) * is;
        yr[j] = pg[j] * hr[j] + pb[j];
      }
    }
  });
  if (detail::tracing({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape::active()->record(on, {xn, gn, bn}, [xn, gn, bn, on, xhat, inv_std, rows, D] {
      const double* g = on->grad.data();
      const double* h = xhat->data();
      if (gn->requires_grad || bn->requires_grad) {
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < D; ++j) {
            if (gn->requires_grad) gn->grad[static_cast<std::size_t>(j)] += g[r * D + j] * h[r * D + j];
            if (bn->requires_grad) bn->grad[static_cast<std::size_t>(j)] += g[r * D + j];
          }
      }
      if (xn->requires_grad) {
        const double* gw = gn->value.data();
        const double* is = inv_std->data();
        double* gx = xn->grad.data();
        parallel_for(rows, 64, [&](std::int64_t r0, std::int64_t r1) {
          for (std::int64_t r = r0; r < r1; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::int64_t j = 0; j < D; ++j) {
              const double dh = g[r * D + j] * gw[j];
              mean_dh += dh;
              mean_dh_h += dh * h[r * D + j];
            }
            mean_dh /= static_cast<double>(D);
            mean_dh_h /= static_cast<double>(D);
            for (std::int64_t j = 0; j < D; ++j) {
              const double dh = g[r * D + j] * gw[j];
              gx[r * D + j] += is[r] * (dh - mean_dh - h[r * D + j] * mean_dh_h);
            }
          }
        });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Per-sample negative log likelihood; no batch reduction (gating is applied
// per sample downstream).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimError("cross_entropy: logits must be [B,K], got " + shape_str(logits.shape()));
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B)
    throw DimError("cross_entropy: label count " + std::to_string(labels.size()) +
                   " does not match batch " + std::to_string(B));
  for (std::int64_t b = 0; b < B; ++b)
    if (labels[static_cast<std::size_t>(b)] < 0 || labels[static_cast<std::size_t>(b)] >= K)
      throw IndexError("cross_entropy: label " + std::to_string(labels[static_cast<std::size_t>(b)]) +
                       " out of range [0," + std::to_string(K) + ") at sample " + std::to_string(b));
  Tensor out = Tensor::uninitialized({B});
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * K));
  const double* pl = logits.data();
  double* po = out.data();
  double* pp = probs->data();
  for (std::int64_t b = 0; b < B; ++b) {
    const double* lr = pl + b * K;
    double mx = lr[0];
    for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, lr[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < K; ++j) {
      pp[b * K + j] = std::exp(lr[j] - mx);
      sum += pp[b * K + j];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < K; ++j) pp[b * K + j] *= inv;
    po[b] = std::log(sum) + mx - lr[labels[static_cast<std::size_t>(b)]];
  }
  if (detail::tracing({&logits})) {
    out.set_requires_grad(true);
    auto ln = logits.node(), on = out.node();
    Tape::active()->record(on, {ln}, [ln, on, probs, labels, B, K] {
      if (!ln->requires_grad) return;
      const double* g = on->grad.data();
      const double* pp2 = probs->data();
      for (std::int64_t b = 0; b < B; ++b) {
        const double gb = g[b];
        for (std::int64_t j = 0; j < K; ++j) {
          const double ind = (j == labels[static_cast<std::size_t>(b)]) ? 1.0 : 0.0;
          ln->grad[static_cast<std::size_t>(b * K + j)] += gb * (pp2[b * K + j] - ind);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and patch extraction
// ---------------------------------------------------------------------------

// Per-channel 3x3 correlation with one-cell zero padding.
inline Tensor depthwise_conv3x3(const Tensor& grid, const Tensor& kernels) {
  if (grid.rank() != 4) throw DimError("depthwise_conv3x3: grid must be [B,H,W,C], got " + shape_str(grid.shape()));
  if (kernels.rank() != 3 || kernels.dim(1) != 3 || kernels.dim(2) != 3 || kernels.dim(0) != grid.dim(3))
    throw DimError("depthwise_conv3x3: kernels " + shape_str(kernels.shape()) +
                   " do not match grid channels " + shape_str(grid.shape()));
  const std::int64_t B = grid.dim(0), H = grid.dim(1), W = grid.dim(2), C = grid.dim(3);
  Tensor out = Tensor::uninitialized(grid.shape());
  const double* pg = grid.data();
  const double* pk = kernels.data();
  double* po = out.data();
  auto at = [&](std::int64_t b, std::int64_t y, std::int64_t x, std::int64_t c) {
    return ((b * H + y) * W + x) * C + c;
  };
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x)
        for (std::int64_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) {
              const std::int64_t yy = y + dy - 1, xx = x + dx - 1;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              acc += pg[at(b, yy, xx, c)] * pk[(c * 3 + dy) * 3 + dx];
            }
          po[at(b, y, x, c)] = acc;
        }
  if (detail::tracing({&grid, &kernels})) {
    out.set_requires_grad(true);
    auto gn = grid.node(), kn = kernels.node(), on = out.node();
    Tape::active()->record(on, {gn, kn}, [gn, kn, on, B, H, W, C] {
      const double* g = on->grad.data();
      auto at2 = [&](std::int64_t b, std::int64_t y, std::int64_t x, std::int64_t c) {
        return ((b * H + y) * W + x) * C + c;
      };
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t c = 0; c < C; ++c) {
              const double gv = g[at2(b, y, x, c)];
              if (gv == 0.0) continue;
              for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx) {
                  const std::int64_t yy = y + dy - 1, xx = x + dx - 1;
                  if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                  if (gn->requires_grad)
                    gn->grad[static_cast<std::size_t>(at2(b, yy, xx, c))] += gv * kn->value[static_cast<std::size_t>((c * 3 + dy) * 3 + dx)];
                  if (kn->requires_grad)
                    kn->grad[static_cast<std::size_t>((c * 3 + dy) * 3 + dx)] += gv * gn->value[static_cast<std::size_t>(at2(b, yy, xx, c))];
                }
            }
    });
  }
  return out;
}

// Non-overlapping p x p patches in row-major patch order:
// [B,S,S,C] -> [B, (S/p)^2, p*p*C]
inline Tensor extract_patches(const Tensor& img, std::int64_t p) {
  if (img.rank() != 4) throw DimError("extract_patches: image must be [B,H,W,C], got " + shape_str(img.shape()));
  const std::int64_t B = img.dim(0), H = img.dim(1), W = img.dim(2), C = img.dim(3);
  if (H != W || p <= 0 || H % p != 0)
    throw DimError("extract_patches: side " + std::to_string(H) + " not divisible by patch " +
                   std::to_string(p));
  const std::int64_t G = H / p;
  const std::int64_t N = G * G;
  const std::int64_t M = p * p * C;
  Tensor out = Tensor::uninitialized({B, N, M});
  const double* pi = img.data();
  double* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t py = 0; py < G; ++py)
      for (std::int64_t px = 0; px < G; ++px) {
        double* dst = po + (b * N + py * G + px) * M;
        for (std::int64_t dy = 0; dy < p; ++dy)
          for (std::int64_t dx = 0; dx < p; ++dx)
            for (std::int64_t c = 0; c < C; ++c)
              *dst++ = pi[((b * H + py * p + dy) * W + px * p + dx) * C + c];
      }
  if (detail::tracing({&img})) {
    out.set_requires_grad(true);
    auto in = img.node(), on = out.node();
    Tape::active()->record(on, {in}, [in, on, B, H, W, C, p, G, N, M] {
      if (!in->requires_grad) return;
      const double* g = on->grad.data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t py = 0; py < G; ++py)
          for (std::int64_t px = 0; px < G; ++px) {
            const double* src = g + (b * N + py * G + px) * M;
            for (std::int64_t dy = 0; dy < p; ++dy)
              for (std::int64_t dx = 0; dx < p; ++dx)
                for (std::int64_t c = 0; c < C; ++c)
                  in->grad[static_cast<std::size_t>(((b * H + py * p + dy) * W + px * p + dx) * C + c)] += *src++;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics helpers for the high-order predictor
// ---------------------------------------------------------------------------

// Subtract the per-(batch, channel) mean over the token axis of [B,N,d].
inline Tensor center_tokens(const Tensor& x) {
  if (x.rank() != 3) throw DimError("center_tokens: expected [B,N,d], got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
  Tensor out = Tensor::uninitialized(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (std::int64_t t = 0; t < N; ++t) m += px[(b * N + t) * d + j];
      m /= static_cast<double>(N);
      for (std::int64_t t = 0; t < N; ++t) po[(b * N + t) * d + j] = px[(b * N + t) * d + j] - m;
    }
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, B, N, d] {
      if (!xn->requires_grad) return;
      const double* g = on->grad.data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < d; ++j) {
          double m = 0.0;
          for (std::int64_t t = 0; t < N; ++t) m += g[(b * N + t) * d + j];
          m /= static_cast<double>(N);
          for (std::int64_t t = 0; t < N; ++t)
            xn->grad[static_cast<std::size_t>((b * N + t) * d + j)] += g[(b * N + t) * d + j] - m;
        }
    });
  }
  return out;
}

// sign(x) * (sqrt(|x| + eps) - sqrt(eps)): signed square root smoothed so the
// derivative stays finite at zero.
inline Tensor signed_sqrt(const Tensor& x, double eps = 1e-12) {
  Tensor out = Tensor::uninitialized(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const double root_eps = std::sqrt(eps);
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double s = px[i] >= 0.0 ? 1.0 : -1.0;
    po[i] = s * (std::sqrt(std::fabs(px[i]) + eps) - root_eps);
  }
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, eps] {
      if (!xn->requires_grad) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += 0.5 / std::sqrt(std::fabs(xn->value[i]) + eps) * on->grad[i];
    });
  }
  return out;
}

// Per-row unit normalization of [B,M]; all-zero rows stay exactly zero.
inline Tensor l2_normalize_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimError("l2_normalize_rows: expected [B,M], got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), M = x.dim(1);
  Tensor out = Tensor::uninitialized(x.shape());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B));
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t b = 0; b < B; ++b) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < M; ++j) ss += px[b * M + j] * px[b * M + j];
    const double nrm = std::sqrt(ss);
    (*norms)[static_cast<std::size_t>(b)] = nrm;
    if (nrm > 0.0)
      for (std::int64_t j = 0; j < M; ++j) po[b * M + j] = px[b * M + j] / nrm;
    else
      for (std::int64_t j = 0; j < M; ++j) po[b * M + j] = 0.0;
  }
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on, norms, B, M] {
      if (!xn->requires_grad) return;
      const double* g = on->grad.data();
      const double* y = on->value.data();
      for (std::int64_t b = 0; b < B; ++b) {
        const double nrm = (*norms)[static_cast<std::size_t>(b)];
        if (nrm == 0.0) continue;
        double dot = 0.0;
        for (std::int64_t j = 0; j < M; ++j) dot += g[b * M + j] * y[b * M + j];
        for (std::int64_t j = 0; j < M; ++j)
          xn->grad[static_cast<std::size_t>(b * M + j)] += (g[b * M + j] - y[b * M + j] * dot) / nrm;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  const double* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc);
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, {xn}, [xn, on] {
      if (!xn->requires_grad) return;
      const double g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  const double* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    const double inv = 1.0 / static_cast<double>(n);
    Tape::active()->record(on, {xn}, [xn, on, inv] {
      if (!xn->requires_grad) return;
      const double g = on->grad[0] * inv;
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

// Mean squared difference, as a scalar (used by the feature regularizer).
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mse");
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace dmpo
