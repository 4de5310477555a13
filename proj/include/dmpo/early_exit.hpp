#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dmpo/backbone.hpp"
#include "dmpo/data.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Analytic FLOPs model. FLOPs = 2 x multiply-accumulates; normalizations,
// softmax and residual adds are excluded. Adapters are treated as merged
// into the projections (no extra inference cost), so block cost is
// 8*N*D^2 + 4*N^2*D for attention plus 4*N*D*(mlp_ratio*D) for the MLP.
// ---------------------------------------------------------------------------

struct FlopsModel {
  double patch_embed = 0.0;
  double block = 0.0;
  std::vector<double> predictor;   // per stage, including its bypass
  std::vector<double> cumulative;  // c_i: cost of exiting at stage i (1-based index i-1)

  double full() const { return cumulative.back(); }
  std::int64_t stages() const { return static_cast<std::int64_t>(cumulative.size()); }
};

inline FlopsModel build_flops_model(const ModelConfig& cfg_in) {
  ModelConfig cfg = cfg_in;
  cfg.fill_defaults();
  cfg.validate();
  FlopsModel fm;
  const double N = static_cast<double>(cfg.tokens());
  const double Np = static_cast<double>(cfg.patch_tokens());
  const double D = static_cast<double>(cfg.embed_dim);
  const double K = static_cast<double>(cfg.num_classes);
  fm.patch_embed = 2.0 * Np * static_cast<double>(cfg.patch_side * cfg.patch_side * cfg.channels) * D;
  fm.block = 8.0 * N * D * D + 4.0 * N * N * D +
             4.0 * N * D * static_cast<double>(cfg.mlp_hidden());
  std::size_t hp_next = 0;
  double running = fm.patch_embed;
  for (std::int64_t s = 0; s < cfg.stages; ++s) {
    double pred = 4.0 * N * D * static_cast<double>(cfg.bypass_rank);  // low-rank bypass pair
    if (cfg.predictor_kinds[static_cast<std::size_t>(s)] == PredictorKind::HighOrder) {
      const double d = static_cast<double>(cfg.hp_proj_dims[hp_next++]);
      const double H = static_cast<double>(cfg.hp_heads);
      if (cfg.hp_conv_enabled) pred += 2.0 * 9.0 * Np * D;
      pred += 4.0 * Np * D * d;        // paired projections over all heads
      pred += 2.0 * H * Np * d * d;    // cross-covariance
      pred += 2.0 * H * d * d * K;     // classifier
    } else {
      pred += 2.0 * D * K;
    }
    fm.predictor.push_back(pred);
    running += static_cast<double>(cfg.blocks_per_stage) * fm.block + pred;
    fm.cumulative.push_back(running);
  }
  return fm;
}

// ---------------------------------------------------------------------------
// Exit policies
// ---------------------------------------------------------------------------

enum class ExitMode { GlobalThreshold, PerStageThresholds, Budget, ForcedStage };

inline std::string exit_mode_name(ExitMode m) {
  switch (m) {
    case ExitMode::GlobalThreshold: return "global_threshold";
    case ExitMode::PerStageThresholds: return "per_stage_thresholds";
    case ExitMode::Budget: return "budget";
    case ExitMode::ForcedStage: return "forced_stage";
  }
  return "global_threshold";
}

inline ExitMode exit_mode_from(const std::string& s) {
  if (s == "global_threshold") return ExitMode::GlobalThreshold;
  if (s == "per_stage_thresholds") return ExitMode::PerStageThresholds;
  if (s == "budget") return ExitMode::Budget;
  if (s == "forced_stage") return ExitMode::ForcedStage;
  throw ConfigError("unknown exit mode '" + s + "'");
}

struct ExitPolicy {
  ExitMode mode = ExitMode::GlobalThreshold;
  double threshold = 1.0;                  // global threshold, or the calibrated one in Budget mode
  std::vector<double> stage_thresholds;    // S-1 values for PerStageThresholds
  double budget = 1.0;                     // rho, fraction of full cost
  std::int64_t forced_stage = 1;           // k for ForcedStage
  bool calibrated = false;

  static ExitPolicy global(double tau) {
    ExitPolicy p;
    p.mode = ExitMode::GlobalThreshold;
    p.threshold = tau;
    return p;
  }

  static ExitPolicy forced(std::int64_t stage) {
    ExitPolicy p;
    p.mode = ExitMode::ForcedStage;
    p.forced_stage = stage;
    return p;
  }

  void validate(std::int64_t stages) const {
    switch (mode) {
      case ExitMode::GlobalThreshold:
        if (threshold < 0.0 || threshold > 1.0) throw ConfigError("threshold must lie in [0,1]");
        break;
      case ExitMode::PerStageThresholds:
        if (static_cast<std::int64_t>(stage_thresholds.size()) != stages - 1)
          throw ConfigError("per-stage thresholds need " + std::to_string(stages - 1) + " entries");
        for (double t : stage_thresholds)
          if (t < 0.0 || t > 1.0) throw ConfigError("thresholds must lie in [0,1]");
        break;
      case ExitMode::Budget:
        if (budget <= 0.0 || budget > 1.0) throw ConfigError("budget must lie in (0,1]");
        break;
      case ExitMode::ForcedStage:
        if (forced_stage < 1 || forced_stage > stages)
          throw ConfigError("forced stage must lie in [1," + std::to_string(stages) + "]");
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// Confidence tables
// ---------------------------------------------------------------------------

struct ConfidenceTable {
  std::vector<std::vector<double>> confidence;  // [sample][stage], all S stages
  std::vector<std::vector<int>> argmax;         // [sample][stage]
  std::vector<int> labels;
  std::int64_t stages = 0;
};

inline ConfidenceTable collect_confidences(const Model& model, const Dataset& ds,
                                           std::int64_t chunk = 250) {
  if (ds.count() < 1) throw ConfigError("collect_confidences: empty dataset");
  ConfidenceTable t;
  t.stages = model.config.stages;
  t.confidence.resize(static_cast<std::size_t>(ds.count()));
  t.argmax.resize(static_cast<std::size_t>(ds.count()));
  t.labels = ds.labels;
  for (std::int64_t off = 0; off < ds.count(); off += chunk) {
    const std::int64_t hi = std::min(off + chunk, ds.count());
    std::vector<std::int64_t> idx;
    for (std::int64_t i = off; i < hi; ++i) idx.push_back(i);
    auto fwd = model.forward_all(batch_images(ds, idx));
    for (std::int64_t i = off; i < hi; ++i) {
      auto& conf = t.confidence[static_cast<std::size_t>(i)];
      auto& am = t.argmax[static_cast<std::size_t>(i)];
      for (std::int64_t s = 0; s < t.stages; ++s) {
        conf.push_back(fwd.predictions[static_cast<std::size_t>(s)].confidence[static_cast<std::size_t>(i - off)]);
        am.push_back(fwd.predictions[static_cast<std::size_t>(s)].argmax[static_cast<std::size_t>(i - off)]);
      }
    }
  }
  return t;
}

// CSV export for offline policy studies: sample_index, stage, confidence.
inline void export_confidences_csv(const ConfidenceTable& t, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "sample_index,stage,confidence\n";
  for (std::size_t i = 0; i < t.confidence.size(); ++i)
    for (std::int64_t s = 0; s < t.stages; ++s) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", t.confidence[i][static_cast<std::size_t>(s)]);
      f << i << "," << (s + 1) << "," << buf << "\n";
    }
}

// ---------------------------------------------------------------------------
// Exit decisions
// ---------------------------------------------------------------------------

// Exit stage (1-based) for one sample given its per-stage confidences.
inline std::int64_t decide_exit_stage(const std::vector<double>& confidence, std::int64_t stages,
                                      const ExitPolicy& policy) {
  switch (policy.mode) {
    case ExitMode::ForcedStage:
      return policy.forced_stage;
    case ExitMode::GlobalThreshold:
    case ExitMode::Budget: {
      if (policy.mode == ExitMode::Budget && !policy.calibrated)
        throw StateError("budget policy used before calibration");
      for (std::int64_t s = 0; s < stages - 1; ++s)
        if (confidence[static_cast<std::size_t>(s)] >= policy.threshold) return s + 1;
      return stages;
    }
    case ExitMode::PerStageThresholds: {
      for (std::int64_t s = 0; s < stages - 1; ++s)
        if (confidence[static_cast<std::size_t>(s)] >= policy.stage_thresholds[static_cast<std::size_t>(s)])
          return s + 1;
      return stages;
    }
  }
  return stages;
}

// Mean cost per sample for a global threshold over a confidence table.
inline double mean_flops_for_threshold(const ConfidenceTable& t, const FlopsModel& fm, double tau) {
  ExitPolicy p = ExitPolicy::global(tau);
  double total = 0.0;
  for (const auto& conf : t.confidence) {
    const std::int64_t stage = decide_exit_stage(conf, t.stages, p);
    total += fm.cumulative[static_cast<std::size_t>(stage - 1)];
  }
  return total / static_cast<double>(t.confidence.size());
}

struct CalibrationResult {
  double tau = 0.0;
  double achieved_fraction = 0.0;
  double budget = 0.0;
};

// Calibrate a single global threshold against a FLOPs budget: over the finite
// candidate set (unique calibration confidences plus {0,1}), mean FLOPs is a
// nondecreasing step function of tau, and we return the largest candidate
// whose induced mean calibration-split FLOPs stays within budget * c_S.
inline CalibrationResult calibrate_threshold(const ConfidenceTable& table, const FlopsModel& fm,
                                             double budget) {
  if (table.confidence.empty()) throw ConfigError("calibrate_threshold: empty confidence table");
  const double full = fm.full();
  const double floor_fraction = fm.cumulative.front() / full;
  if (budget < floor_fraction)
    throw ConfigError("budget " + std::to_string(budget) + " is infeasible: cheapest exit costs " +
                      std::to_string(floor_fraction) + " of full compute");
  if (budget > 1.0) throw ConfigError("budget must lie in (0,1]");
  std::vector<double> candidates = {0.0, 1.0};
  for (const auto& conf : table.confidence)
    for (std::int64_t s = 0; s < table.stages - 1; ++s)
      candidates.push_back(conf[static_cast<std::size_t>(s)]);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  const double limit = budget * full;
  CalibrationResult r;
  r.budget = budget;
  r.tau = 0.0;
  double best_mean = mean_flops_for_threshold(table, fm, 0.0);
  for (double tau : candidates) {
    const double mean = mean_flops_for_threshold(table, fm, tau);
    if (mean <= limit && tau >= r.tau) {
      r.tau = tau;
      best_mean = mean;
    }
  }
  r.achieved_fraction = best_mean / full;
  return r;
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

struct ExitDecision {
  int predicted = -1;
  std::int64_t stage = 0;
  double flops = 0.0;
};

inline ExitDecision infer_with_exit(const Tensor& sample, const Model& model,
                                    const ExitPolicy& policy, const FlopsModel& fm) {
  policy.validate(model.config.stages);
  auto fwd = model.forward_all(sample);
  std::vector<double> conf;
  for (const auto& p : fwd.predictions) conf.push_back(p.confidence[0]);
  ExitDecision d;
  d.stage = decide_exit_stage(conf, model.config.stages, policy);
  d.predicted = fwd.predictions[static_cast<std::size_t>(d.stage - 1)].argmax[0];
  d.flops = fm.cumulative[static_cast<std::size_t>(d.stage - 1)];
  return d;
}

struct EvalReport {
  double overall_accuracy = 0.0;
  std::vector<std::int64_t> exit_counts;          // per stage
  std::vector<double> conditional_accuracy;       // accuracy among samples exiting at each stage
  double mean_flops = 0.0;
  double mean_flops_fraction = 0.0;
  std::int64_t samples = 0;

  json to_json() const {
    json j;
    j["overall_accuracy"] = overall_accuracy;
    j["exit_counts"] = exit_counts;
    j["conditional_accuracy"] = conditional_accuracy;
    j["mean_flops"] = mean_flops;
    j["mean_flops_fraction"] = mean_flops_fraction;
    j["samples"] = samples;
    return j;
  }
};

// Deterministic single pass in ascending sample order.
inline EvalReport evaluate(const Dataset& ds, const Model& model, const ExitPolicy& policy,
                           const FlopsModel& fm) {
  if (ds.count() < 1) throw ConfigError("evaluate: empty dataset");
  policy.validate(model.config.stages);
  const std::int64_t S = model.config.stages;
  ConfidenceTable t = collect_confidences(model, ds);
  EvalReport r;
  r.exit_counts.assign(static_cast<std::size_t>(S), 0);
  std::vector<std::int64_t> correct(static_cast<std::size_t>(S), 0);
  double flops_total = 0.0;
  std::int64_t correct_total = 0;
  for (std::size_t i = 0; i < t.confidence.size(); ++i) {
    const std::int64_t stage = decide_exit_stage(t.confidence[i], S, policy);
    const int pred = t.argmax[i][static_cast<std::size_t>(stage - 1)];
    r.exit_counts[static_cast<std::size_t>(stage - 1)]++;
    flops_total += fm.cumulative[static_cast<std::size_t>(stage - 1)];
    if (pred == t.labels[i]) {
      ++correct_total;
      ++correct[static_cast<std::size_t>(stage - 1)];
    }
  }
  r.samples = ds.count();
  r.overall_accuracy = static_cast<double>(correct_total) / static_cast<double>(r.samples);
  r.mean_flops = flops_total / static_cast<double>(r.samples);
  r.mean_flops_fraction = r.mean_flops / fm.full();
  for (std::int64_t s = 0; s < S; ++s) {
    const std::int64_t n = r.exit_counts[static_cast<std::size_t>(s)];
    r.conditional_accuracy.push_back(
        n > 0 ? static_cast<double>(correct[static_cast<std::size_t>(s)]) / static_cast<double>(n) : 0.0);
  }
  return r;
}

}  // namespace dmpo
