#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dmpo/backbone.hpp"
#include "dmpo/data.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Cosine probes. Features are flattened per sample; zero-norm samples are
// excluded from the mean and counted.
// ---------------------------------------------------------------------------

struct CosineResult {
  double mean = 0.0;
  std::int64_t excluded = 0;
};

// Mean per-sample cosine between two feature tensors of identical shape.
// The denominator is sqrt(<a,a> * <b,b>), which returns exactly 1.0 when the
// inputs are elementwise identical.
inline CosineResult cosine_probe(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimError("cosine_probe: shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " differ");
  const std::int64_t B = a.dim(0);
  const std::int64_t M = a.numel() / B;
  const double* pa = a.data();
  const double* pb = b.data();
  CosineResult r;
  double sum = 0.0;
  std::int64_t included = 0;
  for (std::int64_t s = 0; s < B; ++s) {
    double daa = 0.0, dbb = 0.0, dab = 0.0;
    for (std::int64_t i = 0; i < M; ++i) {
      const double av = pa[s * M + i], bv = pb[s * M + i];
      daa += av * av;
      dbb += bv * bv;
      dab += av * bv;
    }
    if (daa == 0.0 || dbb == 0.0) {
      ++r.excluded;
      continue;
    }
    sum += dab / std::sqrt(daa * dbb);
    ++included;
  }
  r.mean = included > 0 ? sum / static_cast<double>(included) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Probe set: a fixed, seeded slice of validation samples plus the reference
// stage features captured from the backbone before any tuning.
// ---------------------------------------------------------------------------

struct ProbeSet {
  Tensor images;                           // [P, side, side, C]
  std::vector<std::int64_t> indices;       // source sample indices
  std::vector<Tensor> reference_features;  // X_Ori per stage (frozen pre-tuning forward)
};

inline ProbeSet make_probe_set(const Model& reference_model, const Dataset& ds, std::int64_t size,
                               std::uint64_t seed) {
  if (ds.count() < 1) throw ConfigError("probe set needs a non-empty dataset");
  size = std::min<std::int64_t>(size, ds.count());
  auto perm = detail::seeded_permutation(ds.count(), sub_seed(seed, hash64("probe")));
  ProbeSet p;
  p.indices.assign(perm.begin(), perm.begin() + size);
  p.images = batch_images(ds, p.indices);
  p.reference_features = reference_model.forward_stages(reference_model.patch_embed(p.images));
  return p;
}

// Mean cosine between a stage's features before and after its bypass. With a
// zero-initialized bypass this is exactly 1.0.
inline double bypass_similarity(const Model& model, std::int64_t stage, const Tensor& probe_images) {
  if (stage < 1 || stage > model.config.stages)
    throw IndexError("bypass_similarity: stage " + std::to_string(stage) + " out of range");
  auto feats = model.forward_stages(model.patch_embed(probe_images));
  const Tensor& x = feats[static_cast<std::size_t>(stage - 1)];
  Tensor x_hat = bypass_forward(x, model.heads[static_cast<std::size_t>(stage - 1)].bypass);
  return cosine_probe(x, x_hat).mean;
}

// Accuracy when every sample exits at stage k, for each k.
inline std::vector<double> forced_stage_accuracy(const Model& model, const Dataset& ds,
                                                 std::int64_t chunk = 250) {
  const std::int64_t S = model.config.stages;
  std::vector<std::int64_t> correct(static_cast<std::size_t>(S), 0);
  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.count()));
  for (std::int64_t i = 0; i < ds.count(); ++i) order[static_cast<std::size_t>(i)] = i;
  for (std::int64_t off = 0; off < ds.count(); off += chunk) {
    const std::int64_t hi = std::min(off + chunk, ds.count());
    std::vector<std::int64_t> idx(order.begin() + off, order.begin() + hi);
    auto fwd = model.forward_all(batch_images(ds, idx));
    for (std::int64_t s = 0; s < S; ++s) {
      const auto& pred = fwd.predictions[static_cast<std::size_t>(s)];
      for (std::size_t b = 0; b < idx.size(); ++b)
        if (pred.argmax[b] == ds.labels[static_cast<std::size_t>(idx[b])]) ++correct[static_cast<std::size_t>(s)];
    }
  }
  std::vector<double> acc(static_cast<std::size_t>(S));
  for (std::int64_t s = 0; s < S; ++s)
    acc[static_cast<std::size_t>(s)] = static_cast<double>(correct[static_cast<std::size_t>(s)]) /
                                       static_cast<double>(ds.count());
  return acc;
}

// ---------------------------------------------------------------------------
// Token-response heat map: per-token l2 norm of one sample's patch tokens on
// the sqrt(N) x sqrt(N) grid, min-max scaled to [0,255] (an all-equal map is
// all zeros), written as binary PGM plus a CSV of the raw norms.
// ---------------------------------------------------------------------------

inline void export_token_heatmap(const Tensor& features, const std::string& path) {
  if (features.rank() != 3 || features.dim(0) != 1)
    throw ConfigError("export_token_heatmap: expected [1,T,D] features, got " +
                      shape_str(features.shape()));
  const std::int64_t N = features.dim(1) - 1;  // patch tokens, classification token dropped
  const std::int64_t D = features.dim(2);
  const auto g = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(N))));
  if (g * g != N)
    throw ConfigError("export_token_heatmap: token count " + std::to_string(N) +
                      " is not a perfect square");
  std::vector<double> norms(static_cast<std::size_t>(N));
  const double* p = features.data();
  for (std::int64_t t = 0; t < N; ++t) {
    double ss = 0.0;
    for (std::int64_t d = 0; d < D; ++d) {
      const double v = p[(t + 1) * D + d];
      ss += v * v;
    }
    norms[static_cast<std::size_t>(t)] = std::sqrt(ss);
  }
  double lo = norms[0], hi = norms[0];
  for (double v : norms) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P5\n" << g << " " << g << "\n255\n";
  for (double v : norms) {
    const int byte = range > 0.0 ? static_cast<int>(std::lround((v - lo) / range * 255.0)) : 0;
    f.put(static_cast<char>(byte));
  }
  std::ofstream csv(path + ".csv");
  if (!csv) throw IoError("cannot write " + path + ".csv");
  csv << "token_index,row,col,norm\n";
  for (std::int64_t t = 0; t < N; ++t) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", norms[static_cast<std::size_t>(t)]);
    csv << t << "," << (t / g) << "," << (t % g) << "," << buf << "\n";
  }
}

}  // namespace dmpo
