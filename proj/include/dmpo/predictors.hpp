#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmpo/ops.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Exit-head building blocks. The bypass is a low-rank residual transform on
// the path to the predictor only; the inter-stage feature stream never sees
// it. High-order heads classify from second-order token statistics, deep
// heads from the classification token. Every head carries a learnable
// confidence recalibration scalar applied to the logits before softmax.
// ---------------------------------------------------------------------------

struct BypassModule {
  Tensor down;  // [D, r]
  Tensor up;    // [r, D], zero-initialized so the bypass starts as identity
};

// X_hat = X * W_down * W_up + X
inline Tensor bypass_forward(const Tensor& x, const BypassModule& byp) {
  if (x.shape().back() != byp.down.dim(0))
    throw DimError("bypass_forward: feature dim " + shape_str(x.shape()) +
                   " does not match bypass " + shape_str(byp.down.shape()));
  return add(x, linear(linear(x, byp.down), byp.up));
}

struct HighOrderPredictor {
  std::int64_t heads = 2;
  std::int64_t proj_dim = 8;           // d_i
  bool conv_enabled = true;
  std::vector<Tensor> proj_a;          // per head [D/H, d_i]
  std::vector<Tensor> proj_b;          // per head [D/H, d_i]
  Tensor conv_kernels;                 // [D, 3, 3] when conv_enabled
  Tensor cls_w;                        // [H * d_i^2, K]
  Tensor cls_b;                        // [K]
  Tensor beta;                         // [1], initialized to 1
};

struct LinearPredictor {
  Tensor w;     // [D, K]
  Tensor b;     // [K]
  Tensor beta;  // [1], initialized to 1
};

struct PredictionDistribution {
  Tensor logits;      // raw classifier output [B, K]
  Tensor probs;       // softmax(beta * logits) [B, K]
  std::vector<double> confidence;  // per-sample max probability
  std::vector<int> argmax;
};

namespace detail {

inline void fill_confidence(PredictionDistribution& d) {
  const std::int64_t B = d.probs.dim(0), K = d.probs.dim(1);
  d.confidence.resize(static_cast<std::size_t>(B));
  d.argmax.resize(static_cast<std::size_t>(B));
  const double* p = d.probs.data();
  for (std::int64_t b = 0; b < B; ++b) {
    int best = 0;
    double bv = p[b * K];
    for (std::int64_t j = 1; j < K; ++j)
      if (p[b * K + j] > bv) {
        bv = p[b * K + j];
        best = static_cast<int>(j);
      }
    d.confidence[static_cast<std::size_t>(b)] = bv;
    d.argmax[static_cast<std::size_t>(b)] = best;
  }
}

}  // namespace detail

// Multi-head convolutional cross-covariance statistics of the patch tokens:
// drop the classification token, optionally run a depthwise 3x3 over the
// token grid, project each channel group with paired maps, center over
// tokens, form C_h = Z^T Z' / N, signed-sqrt, flatten, l2-normalize.
inline Tensor hp_statistics(const Tensor& x_hat, const HighOrderPredictor& hp) {
  if (x_hat.rank() != 3) throw DimError("hp_statistics: expected [B,T,D], got " + shape_str(x_hat.shape()));
  const std::int64_t T = x_hat.dim(1), D = x_hat.dim(2);
  const std::int64_t N = T - 1;
  if (N < 2) throw DimError("hp_statistics: needs at least 2 patch tokens, got " + std::to_string(N));
  if (D % hp.heads != 0)
    throw ConfigError("hp_statistics: embed dim not divisible by head count");
  Tensor tokens = slice_tokens(x_hat, 1, T);  // [B,N,D]
  if (hp.conv_enabled) {
    const auto g = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(N))));
    if (g * g != N)
      throw ConfigError("hp_statistics: conv needs a square token grid, got N=" + std::to_string(N));
    Tensor grid = reshape(tokens, {x_hat.dim(0), g, g, D});
    tokens = reshape(depthwise_conv3x3(grid, hp.conv_kernels), {x_hat.dim(0), N, D});
  }
  const std::int64_t dh = D / hp.heads;
  const double inv_n = 1.0 / static_cast<double>(N);
  std::vector<Tensor> flats;
  for (std::int64_t h = 0; h < hp.heads; ++h) {
    Tensor seg = slice_last(tokens, h * dh, (h + 1) * dh);               // [B,N,dh]
    Tensor z = center_tokens(linear(seg, hp.proj_a[static_cast<std::size_t>(h)]));   // [B,N,d]
    Tensor zp = center_tokens(linear(seg, hp.proj_b[static_cast<std::size_t>(h)]));  // [B,N,d]
    Tensor cov = scale(bmm(permute(z, {0, 2, 1}), zp), inv_n);           // [B,d,d]
    flats.push_back(reshape(signed_sqrt(cov), {x_hat.dim(0), hp.proj_dim * hp.proj_dim}));
  }
  return l2_normalize_rows(concat_last(flats));  // [B, H*d^2]
}

inline PredictionDistribution hp_predict(const Tensor& x_hat, const HighOrderPredictor& hp) {
  Tensor stats = hp_statistics(x_hat, hp);
  PredictionDistribution d;
  d.logits = add_broadcast(linear(stats, hp.cls_w), hp.cls_b);
  d.probs = softmax_rows(scale_by(d.logits, hp.beta));
  detail::fill_confidence(d);
  return d;
}

inline PredictionDistribution linear_predict(const Tensor& x_hat, const LinearPredictor& lp) {
  PredictionDistribution d;
  Tensor cls_row = take_token(x_hat, 0);  // classification token
  d.logits = add_broadcast(linear(cls_row, lp.w), lp.b);
  d.probs = softmax_rows(scale_by(d.logits, lp.beta));
  detail::fill_confidence(d);
  return d;
}

}  // namespace dmpo
