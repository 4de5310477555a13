#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dmpo/diagnostics.hpp"
#include "dmpo/schedule.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class TrainMode { Full, Peft };

inline std::string train_mode_name(TrainMode m) { return m == TrainMode::Full ? "full" : "peft"; }

inline TrainMode train_mode_from(const std::string& s) {
  if (s == "full") return TrainMode::Full;
  if (s == "peft") return TrainMode::Peft;
  throw ConfigError("unknown train mode '" + s + "' (want full|peft)");
}

struct TrainConfig {
  std::int64_t epochs = 30;
  std::int64_t batch_size = 100;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::Peft;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double lr_final_fraction = 0.1;  // cosine decay floor as a fraction of the base rate
  double dyn_r_weight = 0.0;       // feature-drift regularizer (0 disables it entirely)
  std::int64_t dyn_r_stage = 1;
  GateConfig gate;
  bool timing = true;  // false writes seconds=0 so metrics files are bitwise repeatable

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (lr_final_fraction <= 0.0 || lr_final_fraction > 1.0)
      throw ConfigError("lr_final_fraction must lie in (0, 1]");
    if (dyn_r_weight < 0.0) throw ConfigError("dyn_r_weight must be >= 0");
    if (dyn_r_stage < 1) throw ConfigError("dyn_r_stage must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay. Decay applies only to parameters tagged
// for it (weight matrices); biases, norms and recalibration scalars are
// exempt. Parameters without a gradient this step are skipped.
// ---------------------------------------------------------------------------

class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-4)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParameterRegistry& registry, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& p : registry.entries()) {
      if (p.frozen || !p.tensor.has_grad()) continue;
      auto& state = states_[p.tensor.node().get()];
      auto& val = p.tensor.value();
      const auto& g = p.tensor.grad();
      if (state.m.size() != val.size()) {
        state.m.assign(val.size(), 0.0);
        state.v.assign(val.size(), 0.0);
      }
      const double wd = p.decay ? weight_decay_ : 0.0;
      for (std::size_t i = 0; i < val.size(); ++i) {
        state.m[i] = beta1_ * state.m[i] + (1.0 - beta1_) * g[i];
        state.v[i] = beta2_ * state.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        val[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * val[i]);
      }
      p.tensor.clear_grad();
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::unordered_map<TensorNode*, State> states_;
};

inline double cosine_lr(double base, double final_fraction, std::int64_t epoch, std::int64_t total) {
  if (total <= 1) return base;
  const double lo = base * final_fraction;
  const double t = static_cast<double>(epoch) / static_cast<double>(total - 1);
  return lo + (base - lo) * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
}

// ---------------------------------------------------------------------------
// Per-epoch metrics, streamed as one JSON object per line.
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::int64_t epoch = 0;
  std::vector<double> alpha;
  std::vector<double> train_loss;  // per-stage epoch mean of the gated loss
  std::vector<double> gate_mean;   // per-stage epoch mean gate factor
  std::vector<double> val_acc;     // forced-exit accuracy per stage
  std::vector<double> beta;
  double seconds = 0.0;
  std::vector<double> cos_ref;     // probe: cosine vs reference features (empty without probes)
  std::vector<double> cos_bypass;  // probe: cosine before/after bypass

  // The optimized scalar is reconstructible: sum_i alpha[i] * train_loss[i].
  double weighted_total() const {
    double t = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) t += alpha[i] * train_loss[i];
    return t;
  }

  json to_json() const {
    json j;
    j["epoch"] = epoch;
    j["alpha"] = alpha;
    j["train_loss"] = train_loss;
    j["gate_mean"] = gate_mean;
    j["val_acc"] = val_acc;
    j["beta"] = beta;
    j["seconds"] = seconds;
    if (!cos_ref.empty()) j["cos_ref"] = cos_ref;
    if (!cos_bypass.empty()) j["cos_bypass"] = cos_bypass;
    return j;
  }

  static EpochMetrics from_json(const json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<std::int64_t>();
    m.alpha = j.at("alpha").get<std::vector<double>>();
    m.train_loss = j.at("train_loss").get<std::vector<double>>();
    m.gate_mean = j.at("gate_mean").get<std::vector<double>>();
    m.val_acc = j.at("val_acc").get<std::vector<double>>();
    m.beta = j.at("beta").get<std::vector<double>>();
    m.seconds = j.at("seconds").get<double>();
    if (j.contains("cos_ref")) m.cos_ref = j.at("cos_ref").get<std::vector<double>>();
    if (j.contains("cos_bypass")) m.cos_bypass = j.at("cos_bypass").get<std::vector<double>>();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Training loop. The model must already be in its mode (frozen + adapters
// attached for PEFT). Same seed and config give bitwise identical metrics
// and parameters.
// ---------------------------------------------------------------------------

inline std::vector<Tensor> stage_losses(const ForwardResult& fwd, const std::vector<int>& labels,
                                        const std::vector<Tensor>& betas) {
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < fwd.predictions.size(); ++s)
    out.push_back(cross_entropy(scale_by(fwd.predictions[s].logits, betas[s]), labels));
  return out;
}

inline std::vector<Tensor> stage_betas(const Model& model) {
  std::vector<Tensor> betas;
  for (const auto& h : model.heads)
    betas.push_back(h.kind == PredictorKind::HighOrder ? h.hp.beta : h.lin.beta);
  return betas;
}

inline std::vector<EpochMetrics> fit(Model& model, const Dataset& train, const Dataset& val,
                                     const TrainConfig& tc, const LossWeightSchedule& schedule,
                                     std::ostream* metrics_out = nullptr,
                                     const ProbeSet* probe = nullptr) {
  tc.validate();
  if (train.count() < 1 || val.count() < 1) throw ConfigError("fit: empty train or validation set");
  const std::int64_t S = model.config.stages;
  if (static_cast<std::int64_t>(schedule.start.size()) != S)
    throw ConfigError("fit: schedule has " + std::to_string(schedule.start.size()) +
                      " stages, model has " + std::to_string(S));
  if (tc.dyn_r_weight > 0.0) {
    if (model.peft_mode == false)
      throw ConfigError("dyn_r regularizer needs a frozen reference backbone (peft mode)");
    if (tc.dyn_r_stage > S) throw IndexError("dyn_r_stage out of range");
  }

  AdamW opt(0.9, 0.999, 1e-8, tc.weight_decay);
  const std::uint64_t shuffle_seed = sub_seed(tc.seed, hash64("shuffle"));
  const auto betas = stage_betas(model);
  std::vector<EpochMetrics> history;

  for (std::int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t_start = std::chrono::steady_clock::now();
    const double sched_pos =
        tc.epochs == 1 ? 0.0
                       : static_cast<double>(epoch) * static_cast<double>(schedule.total_epochs) /
                             static_cast<double>(tc.epochs - 1);
    const std::vector<double> alpha = schedule_alpha(sched_pos, schedule);
    const double lr = cosine_lr(tc.learning_rate, tc.lr_final_fraction, epoch, tc.epochs);

    std::vector<double> loss_sum(static_cast<std::size_t>(S), 0.0);
    std::vector<double> gate_sum(static_cast<std::size_t>(S), 0.0);
    std::int64_t seen = 0;

    const auto batch_plan = batches(train, tc.batch_size, shuffle_seed, epoch);
    for (std::size_t bi = 0; bi < batch_plan.size(); ++bi) {
      const auto& idx = batch_plan[bi];
      Tensor images = batch_images(train, idx);
      const std::vector<int> labels = batch_labels(train, idx);

      std::vector<Tensor> reference_features;
      if (tc.dyn_r_weight > 0.0) {
        // frozen-backbone forward (no adapters, no tape) as the drift anchor
        std::vector<bool> saved;
        for (auto& blk : model.blocks) {
          saved.push_back(blk.has_adapters);
          blk.has_adapters = false;
        }
        reference_features = model.forward_stages(model.patch_embed(images));
        for (std::size_t i = 0; i < model.blocks.size(); ++i) model.blocks[i].has_adapters = saved[i];
      }

      Tape tape;
      ForwardResult fwd = model.forward_all(images);
      std::vector<Tensor> losses = stage_losses(fwd, labels, betas);
      GatedLosses gated = apply_gates(losses, tc.gate);
      Tensor loss = total_loss(gated.gated, alpha);
      if (tc.dyn_r_weight > 0.0)
        loss = add(loss, scale(dyn_r_regularizer(reference_features, fwd.stage_features,
                                                 tc.dyn_r_stage),
                               tc.dyn_r_weight));
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(bi));
      tape.backward(loss);
      opt.step(model.registry, lr);

      for (std::int64_t s = 0; s < S; ++s) {
        const auto& lv = gated.gated[static_cast<std::size_t>(s)].value();
        for (double v : lv) loss_sum[static_cast<std::size_t>(s)] += v;
        for (double v : gated.factors[static_cast<std::size_t>(s)]) gate_sum[static_cast<std::size_t>(s)] += v;
      }
      seen += static_cast<std::int64_t>(idx.size());
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.alpha = alpha;
    for (std::int64_t s = 0; s < S; ++s) {
      m.train_loss.push_back(loss_sum[static_cast<std::size_t>(s)] / static_cast<double>(seen));
      m.gate_mean.push_back(gate_sum[static_cast<std::size_t>(s)] / static_cast<double>(seen));
    }
    m.val_acc = forced_stage_accuracy(model, val);
    m.beta = model.beta_values();
    if (probe != nullptr) {
      auto feats = model.forward_stages(model.patch_embed(probe->images));
      for (std::int64_t s = 0; s < S; ++s) {
        m.cos_ref.push_back(
            cosine_probe(feats[static_cast<std::size_t>(s)],
                         probe->reference_features[static_cast<std::size_t>(s)])
                .mean);
        Tensor x_hat = bypass_forward(feats[static_cast<std::size_t>(s)],
                                      model.heads[static_cast<std::size_t>(s)].bypass);
        m.cos_bypass.push_back(cosine_probe(feats[static_cast<std::size_t>(s)], x_hat).mean);
      }
    }
    m.seconds = tc.timing
                    ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
                    : 0.0;
    if (metrics_out != nullptr) *metrics_out << m.to_json().dump() << "\n" << std::flush;
    history.push_back(std::move(m));
  }
  return history;
}

}  // namespace dmpo
