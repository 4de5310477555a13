#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dmpo/ops.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Per-stage loss weight schedules. The two-phase presets start with early
// stages de-emphasized (representation first) and end with them emphasized
// (discrimination driven earlier); D2R runs the phases in reverse order.
// Constant presets hold one of the two phase profiles for the whole run.
// ---------------------------------------------------------------------------

enum class SchedulePreset {
  DmpoR2D,
  D2R,
  ConstantAscending,   // alpha_early < alpha_deep, fixed
  ConstantDescending,  // alpha_early > alpha_deep, fixed
  Uniform1,            // alpha_i = 1
  UniformInvS,         // alpha_i = 1/S
  CalmLinear,          // alpha_i = i / sum_j j
  Custom,
};

inline std::string schedule_preset_name(SchedulePreset p) {
  switch (p) {
    case SchedulePreset::DmpoR2D: return "dmpo_r2d";
    case SchedulePreset::D2R: return "d2r";
    case SchedulePreset::ConstantAscending: return "constant_ascending";
    case SchedulePreset::ConstantDescending: return "constant_descending";
    case SchedulePreset::Uniform1: return "uniform_1";
    case SchedulePreset::UniformInvS: return "uniform_inv_s";
    case SchedulePreset::CalmLinear: return "calm_linear";
    case SchedulePreset::Custom: return "custom";
  }
  return "custom";
}

inline SchedulePreset schedule_preset_from(const std::string& s) {
  if (s == "dmpo_r2d") return SchedulePreset::DmpoR2D;
  if (s == "d2r") return SchedulePreset::D2R;
  if (s == "constant_ascending") return SchedulePreset::ConstantAscending;
  if (s == "constant_descending") return SchedulePreset::ConstantDescending;
  if (s == "uniform_1") return SchedulePreset::Uniform1;
  if (s == "uniform_inv_s") return SchedulePreset::UniformInvS;
  if (s == "calm_linear") return SchedulePreset::CalmLinear;
  if (s == "custom") return SchedulePreset::Custom;
  throw ConfigError("unknown schedule preset '" + s + "'");
}

namespace detail {

// Default two-phase anchors for four stages; other stage counts resample the
// profile piecewise-linearly, which reproduces the anchors exactly at S=4.
inline constexpr std::array<double, 4> kAscendingAnchor = {0.01, 0.01, 1.0, 2.0};
inline constexpr std::array<double, 4> kDescendingAnchor = {1.5, 1.0, 0.1, 0.1};

inline std::vector<double> resample_anchor(const std::array<double, 4>& anchor, std::int64_t S) {
  if (S == 1) return {1.0};
  std::vector<double> out(static_cast<std::size_t>(S));
  for (std::int64_t i = 0; i < S; ++i) {
    const double pos = 3.0 * static_cast<double>(i) / static_cast<double>(S - 1);
    const int seg = std::min(static_cast<int>(pos), 2);
    const double frac = pos - seg;
    out[static_cast<std::size_t>(i)] =
        anchor[static_cast<std::size_t>(seg)] +
        frac * (anchor[static_cast<std::size_t>(seg + 1)] - anchor[static_cast<std::size_t>(seg)]);
  }
  return out;
}

}  // namespace detail

struct LossWeightSchedule {
  SchedulePreset preset = SchedulePreset::DmpoR2D;
  std::vector<double> start;  // alpha at epoch 0
  std::vector<double> end;    // alpha at epoch E
  std::int64_t total_epochs = 1;  // E

  bool interpolating() const {
    return preset == SchedulePreset::DmpoR2D || preset == SchedulePreset::D2R ||
           preset == SchedulePreset::Custom;
  }

  static LossWeightSchedule make(SchedulePreset preset, std::int64_t stages, std::int64_t epochs,
                                 std::vector<double> custom_start = {},
                                 std::vector<double> custom_end = {}) {
    if (stages < 1) throw ConfigError("schedule needs at least one stage");
    if (epochs < 1) throw ConfigError("schedule needs at least one epoch");
    LossWeightSchedule s;
    s.preset = preset;
    s.total_epochs = epochs;
    switch (preset) {
      case SchedulePreset::DmpoR2D:
        s.start = detail::resample_anchor(detail::kAscendingAnchor, stages);
        s.end = detail::resample_anchor(detail::kDescendingAnchor, stages);
        break;
      case SchedulePreset::D2R:
        s.start = detail::resample_anchor(detail::kDescendingAnchor, stages);
        s.end = detail::resample_anchor(detail::kAscendingAnchor, stages);
        break;
      case SchedulePreset::ConstantAscending:
        s.start = detail::resample_anchor(detail::kAscendingAnchor, stages);
        s.end = s.start;
        break;
      case SchedulePreset::ConstantDescending:
        s.start = detail::resample_anchor(detail::kDescendingAnchor, stages);
        s.end = s.start;
        break;
      case SchedulePreset::Uniform1:
        s.start.assign(static_cast<std::size_t>(stages), 1.0);
        s.end = s.start;
        break;
      case SchedulePreset::UniformInvS:
        s.start.assign(static_cast<std::size_t>(stages), 1.0 / static_cast<double>(stages));
        s.end = s.start;
        break;
      case SchedulePreset::CalmLinear: {
        const double denom = static_cast<double>(stages * (stages + 1)) / 2.0;
        for (std::int64_t i = 1; i <= stages; ++i) s.start.push_back(static_cast<double>(i) / denom);
        s.end = s.start;
        break;
      }
      case SchedulePreset::Custom:
        s.start = std::move(custom_start);
        s.end = std::move(custom_end);
        if (s.end.empty()) s.end = s.start;
        break;
    }
    if (static_cast<std::int64_t>(s.start.size()) != stages ||
        static_cast<std::int64_t>(s.end.size()) != stages)
      throw ConfigError("schedule start/end must each have " + std::to_string(stages) + " entries");
    for (double v : s.start)
      if (v <= 0.0) throw ConfigError("schedule weights must be positive");
    for (double v : s.end)
      if (v <= 0.0) throw ConfigError("schedule weights must be positive");
    return s;
  }
};

// alpha_i(e) = start_i + (e/E) * (end_i - start_i) for interpolating presets;
// constant presets ignore e. e may be fractional, in [0, E].
inline std::vector<double> schedule_alpha(double epoch, const LossWeightSchedule& s) {
  if (epoch < 0.0 || epoch > static_cast<double>(s.total_epochs))
    throw IndexError("schedule epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(s.total_epochs) + "]");
  if (!s.interpolating()) return s.start;
  const double t = epoch / static_cast<double>(s.total_epochs);
  // convex form so t=0 and t=1 reproduce the endpoints exactly
  std::vector<double> out(s.start.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * s.start[i] + t * s.end[i];
  return out;
}

// ---------------------------------------------------------------------------
// Inter-stage gate: scale stage-i loss per sample by an activation of the
// previous stage's loss. Stage 1 is never gated. With detach (default) the
// factor is a numeric constant during backward.
// ---------------------------------------------------------------------------

enum class GateActivation { Sigmoid, Identity, Tanh, SoftmaxOverStages, None };

inline std::string gate_activation_name(GateActivation a) {
  switch (a) {
    case GateActivation::Sigmoid: return "sigmoid";
    case GateActivation::Identity: return "identity";
    case GateActivation::Tanh: return "tanh";
    case GateActivation::SoftmaxOverStages: return "softmax_over_stages";
    case GateActivation::None: return "none";
  }
  return "sigmoid";
}

inline GateActivation gate_activation_from(const std::string& s) {
  if (s == "sigmoid") return GateActivation::Sigmoid;
  if (s == "identity") return GateActivation::Identity;
  if (s == "tanh") return GateActivation::Tanh;
  if (s == "softmax_over_stages") return GateActivation::SoftmaxOverStages;
  if (s == "none") return GateActivation::None;
  throw ConfigError("unknown gate activation '" + s + "'");
}

struct GateConfig {
  GateActivation activation = GateActivation::Sigmoid;
  bool detach = true;
};

struct GatedLosses {
  std::vector<Tensor> gated;                 // per-stage [B]
  std::vector<std::vector<double>> factors;  // per-stage per-sample gate values
};

inline GatedLosses apply_gates(const std::vector<Tensor>& losses, const GateConfig& gate) {
  if (losses.empty()) throw DimError("apply_gates: no stage losses");
  GatedLosses out;
  const std::int64_t B = losses[0].numel();
  out.gated.push_back(losses[0]);  // stage 1 is passed through untouched
  out.factors.emplace_back(static_cast<std::size_t>(B), 1.0);

  // For the softmax variant the factor for stage i is the (i-1)-th component
  // of a per-sample softmax across all S stage losses, scaled by S so the
  // all-equal case yields factor 1.
  Tensor softmax_stack;
  if (gate.activation == GateActivation::SoftmaxOverStages && losses.size() > 1) {
    std::vector<Tensor> cols;
    for (const auto& l : losses) {
      Tensor src = gate.detach ? l.detach() : l;
      cols.push_back(reshape(src, {B, 1}));
    }
    softmax_stack = softmax_rows(concat_last(cols));  // [B, S]
  }

  for (std::size_t i = 1; i < losses.size(); ++i) {
    if (gate.activation == GateActivation::None) {
      out.gated.push_back(losses[i]);
      out.factors.emplace_back(static_cast<std::size_t>(B), 1.0);
      continue;
    }
    Tensor factor;
    if (gate.activation == GateActivation::SoftmaxOverStages) {
      factor = scale(reshape(slice_last(softmax_stack, static_cast<std::int64_t>(i) - 1,
                                        static_cast<std::int64_t>(i)),
                             {B}),
                     static_cast<double>(losses.size()));
    } else {
      Tensor src = gate.detach ? losses[i - 1].detach() : losses[i - 1];
      switch (gate.activation) {
        case GateActivation::Sigmoid: factor = sigmoid(src); break;
        case GateActivation::Identity: factor = src; break;
        case GateActivation::Tanh: factor = tanh_act(src); break;
        default: break;
      }
    }
    out.factors.push_back(factor.value());
    out.gated.push_back(mul(factor, losses[i]));
  }
  return out;
}

// L = (1/B) sum_b sum_i alpha_i * gated[b,i]
inline Tensor total_loss(const std::vector<Tensor>& gated, const std::vector<double>& alpha) {
  if (gated.size() != alpha.size())
    throw DimError("total_loss: " + std::to_string(gated.size()) + " stages vs " +
                   std::to_string(alpha.size()) + " weights");
  Tensor acc;
  for (std::size_t i = 0; i < gated.size(); ++i) {
    Tensor term = scale(mean_all(gated[i]), alpha[i]);
    acc = i == 0 ? term : add(acc, term);
  }
  return acc;
}

// Mean squared drift of stage-i features from a frozen reference forward.
inline Tensor dyn_r_regularizer(const std::vector<Tensor>& reference_features,
                                const std::vector<Tensor>& features, std::int64_t stage) {
  if (stage < 1 || stage > static_cast<std::int64_t>(features.size()))
    throw IndexError("dyn_r_regularizer: stage " + std::to_string(stage) + " out of range [1," +
                     std::to_string(features.size()) + "]");
  return mse(reference_features[static_cast<std::size_t>(stage - 1)],
             features[static_cast<std::size_t>(stage - 1)]);
}

}  // namespace dmpo
