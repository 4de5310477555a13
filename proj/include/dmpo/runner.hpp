#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dmpo/config.hpp"
#include "dmpo/gradcheck.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Run orchestration shared by the command-line tool and the acceptance
// harness. Every entry point is a pure function of the resolved RunConfig,
// so a run can be reproduced from its resolved_config.json alone.
// ---------------------------------------------------------------------------

struct DataSplits {
  Dataset train, val, test;
};

inline DataSplits build_datasets(const RunConfig& cfg) {
  DataSplits out;
  if (cfg.data.source == "synthetic") {
    // one sample stream, contiguous disjoint ranges: the splits share the
    // task (textures) but never share a sample
    SyntheticSpec spec = cfg.data.synthetic;
    spec.sample_count = cfg.data.train_count;
    out.train = generate_synthetic(spec, 0);
    spec.sample_count = cfg.data.val_count;
    out.val = generate_synthetic(spec, cfg.data.train_count);
    spec.sample_count = cfg.data.test_count;
    out.test = generate_synthetic(spec, cfg.data.train_count + cfg.data.val_count);
  } else {
    Dataset all = load_idx(cfg.data.idx_images, cfg.data.idx_labels);
    auto parts = split(all, cfg.data.idx_split, sub_seed(cfg.seed, hash64("split")));
    if (parts.size() != 3) throw ConfigError("idx split must produce train/val/test");
    out.train = std::move(parts[0]);
    out.val = std::move(parts[1]);
    out.test = std::move(parts[2]);
  }
  return out;
}

inline const Dataset& pick_split(const DataSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  return s.test;
}

// Copy only backbone weights (patch embed, tokens, blocks) from a checkpoint,
// leaving predictors and adapters at their fresh initialization.
inline void load_backbone_params(Model& m, const CheckpointData& ckpt) {
  CheckpointData filtered;
  filtered.config = ckpt.config;
  for (const auto& [name, t] : ckpt.params) {
    if (name.rfind("patch.", 0) == 0 || name.rfind("cls_token", 0) == 0 ||
        name.rfind("pos_embed", 0) == 0 || name.rfind("blocks.", 0) == 0)
      filtered.params.emplace_back(name, t);
  }
  const std::int64_t loaded = load_params(m, filtered, /*strict=*/false);
  if (loaded == 0) throw ConfigError("init checkpoint shares no backbone parameters with the model");
}

// Model at its training starting point: fresh init, optional backbone warm
// start, frozen backbone plus adapters in PEFT mode.
inline Model build_model(const RunConfig& cfg) {
  Model m = Model::build(cfg.model, cfg.seed);
  if (!cfg.init_checkpoint.empty()) load_backbone_params(m, load_checkpoint(cfg.init_checkpoint));
  if (cfg.train.mode == TrainMode::Peft) {
    m.freeze_backbone();
    m.attach_adapters(cfg.model.adapter_rank > 0 ? cfg.model.adapter_rank : 4, cfg.seed);
  }
  return m;
}

inline void ensure_output_dir(const RunConfig& cfg) {
  if (cfg.output_dir.empty()) throw ConfigError("this command needs an output directory (--out)");
  std::filesystem::create_directories(cfg.output_dir);
}

inline void write_resolved_config(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  write_json_file(cfg.to_json(), cfg.output_dir + "/resolved_config.json");
}

struct TrainOutputs {
  Model model;
  std::vector<EpochMetrics> metrics;
};

inline TrainOutputs run_train(const RunConfig& cfg) {
  write_resolved_config(cfg);
  DataSplits data = build_datasets(cfg);
  Model model = build_model(cfg);
  ProbeSet probe;
  const bool probes_on = cfg.probe_size > 0;
  if (probes_on) probe = make_probe_set(model, data.val, cfg.probe_size, cfg.seed);
  std::ofstream metrics_file(cfg.output_dir + "/metrics.jsonl");
  if (!metrics_file) throw IoError("cannot write metrics.jsonl in " + cfg.output_dir);
  auto metrics = fit(model, data.train, data.val, cfg.train, cfg.schedule, &metrics_file,
                     probes_on ? &probe : nullptr);
  save_checkpoint(model, cfg.output_dir + "/checkpoint.bin");
  return {std::move(model), std::move(metrics)};
}

inline Model load_run_model(const RunConfig& cfg) {
  const std::string path = cfg.output_dir + "/checkpoint.bin";
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path + "; train first");
  CheckpointData ckpt = load_checkpoint(path);
  Model m = Model::build(ckpt.config, cfg.seed);
  if (cfg.train.mode == TrainMode::Peft) {
    m.freeze_backbone();
    m.attach_adapters(ckpt.config.adapter_rank > 0 ? ckpt.config.adapter_rank : 4, cfg.seed);
  }
  load_params(m, ckpt, /*strict=*/true);
  return m;
}

inline EvalReport run_eval(const RunConfig& cfg) {
  Model model = load_run_model(cfg);
  DataSplits data = build_datasets(cfg);
  FlopsModel fm = build_flops_model(model.config);
  ExitPolicy policy = cfg.exit_policy;
  if (policy.mode == ExitMode::Budget) {
    auto cal = calibrate_threshold(collect_confidences(model, data.val), fm, policy.budget);
    policy.threshold = cal.tau;
    policy.calibrated = true;
  }
  EvalReport report = evaluate(pick_split(data, cfg.eval_split), model, policy, fm);
  write_json_file(report.to_json(), cfg.output_dir + "/eval_report.json");
  return report;
}

inline CalibrationResult run_calibrate(const RunConfig& cfg) {
  Model model = load_run_model(cfg);
  DataSplits data = build_datasets(cfg);
  FlopsModel fm = build_flops_model(model.config);
  ConfidenceTable table = collect_confidences(model, data.val);
  CalibrationResult result = calibrate_threshold(table, fm, cfg.exit_policy.budget);
  json j;
  j["budget"] = result.budget;
  j["tau"] = result.tau;
  j["achieved_fraction"] = result.achieved_fraction;
  write_json_file(j, cfg.output_dir + "/calibration.json");
  export_confidences_csv(table, cfg.output_dir + "/confidences.csv");
  return result;
}

inline json run_probe(const RunConfig& cfg, std::int64_t heatmap_samples = 4) {
  Model tuned = load_run_model(cfg);
  DataSplits data = build_datasets(cfg);
  // the reference is the model at its training starting point, rebuilt
  // deterministically from the same config (and init checkpoint when given)
  Model reference = build_model(cfg);
  ProbeSet probe = make_probe_set(reference, data.val, cfg.probe_size, cfg.seed);

  json report;
  auto feats = tuned.forward_stages(tuned.patch_embed(probe.images));
  std::vector<double> cos_ref, cos_bypass;
  for (std::int64_t s = 0; s < tuned.config.stages; ++s) {
    cos_ref.push_back(cosine_probe(feats[static_cast<std::size_t>(s)],
                                   probe.reference_features[static_cast<std::size_t>(s)])
                          .mean);
    Tensor x_hat = bypass_forward(feats[static_cast<std::size_t>(s)],
                                  tuned.heads[static_cast<std::size_t>(s)].bypass);
    cos_bypass.push_back(cosine_probe(feats[static_cast<std::size_t>(s)], x_hat).mean);
  }
  report["cos_ref"] = cos_ref;
  report["cos_bypass"] = cos_bypass;
  report["forced_stage_accuracy"] = forced_stage_accuracy(tuned, pick_split(data, cfg.eval_split));
  report["beta"] = tuned.beta_values();

  const std::string dir = cfg.output_dir + "/heatmaps";
  std::filesystem::create_directories(dir);
  const std::int64_t n = std::min<std::int64_t>(heatmap_samples, probe.images.dim(0));
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor img = Tensor::zeros({1, tuned.config.image_side, tuned.config.image_side, tuned.config.channels});
    std::copy_n(probe.images.data() + i * img.numel(), img.numel(), img.data());
    auto fs = tuned.forward_stages(tuned.patch_embed(img));
    for (std::int64_t s = 0; s < tuned.config.stages; ++s) {
      const std::string base = dir + "/sample" + std::to_string(i) + "_stage" + std::to_string(s + 1);
      export_token_heatmap(fs[static_cast<std::size_t>(s)], base + "_pre.pgm");
      Tensor x_hat = bypass_forward(fs[static_cast<std::size_t>(s)],
                                    tuned.heads[static_cast<std::size_t>(s)].bypass);
      export_token_heatmap(x_hat, base + "_post.pgm");
    }
  }
  write_json_file(report, cfg.output_dir + "/probe_report.json");
  return report;
}

inline json flops_table(const ModelConfig& cfg) {
  FlopsModel fm = build_flops_model(cfg);
  json j;
  j["patch_embed"] = fm.patch_embed;
  j["block"] = fm.block;
  j["predictor"] = fm.predictor;
  j["cumulative"] = fm.cumulative;
  j["full"] = fm.full();
  std::vector<double> fractions;
  for (double c : fm.cumulative) fractions.push_back(c / fm.full());
  j["fraction"] = fractions;
  return j;
}

// Deterministic evaluation-point preparation for gradient checking. The
// standard 0.02-scale initialization leaves many gradients below the
// resolution of central differences at step 1e-5 (the difference of two
// ~O(1) loss values carries ~1e-11 of rounding noise), and near-zero
// covariance entries sit on the signed-sqrt kink where the truncation error
// blows up. This moves the model to a generic point: wider weights, tied
// high-order projections, off-zero bypasses/adapters, moderate beta.
inline void prepare_gradcheck_point(Model& m, std::uint64_t seed) {
  SplitMix64 rng(sub_seed(seed, hash64("gradcheck")));
  for (auto& p : m.registry.entries()) {
    if (p.name.find("hp.proj_a") != std::string::npos) {
      for (auto& v : p.tensor.value()) v = rng.next_normal() * 10.0;
      std::string twin_name = p.name;
      twin_name.replace(twin_name.find("proj_a"), 6, "proj_b");
      if (auto* twin = m.registry.find(twin_name)) twin->tensor.value() = p.tensor.value();
    } else if (p.name.find("hp.proj_b") != std::string::npos) {
      continue;  // set alongside its twin
    } else if (p.name.find(".beta") != std::string::npos) {
      p.tensor.value()[0] = 4.0;
    } else if (p.name.find("hp.conv") != std::string::npos || p.name.find("ln") != std::string::npos ||
               p.name.find("bias") != std::string::npos || p.name.find(".b") == p.name.size() - 2) {
      for (auto& v : p.tensor.value()) v += rng.next_normal() * 0.1;
    } else {
      // weight matrices, embeddings, adapters and bypasses: healthy scale
      for (auto& v : p.tensor.value()) v = rng.next_normal() * 0.3;
    }
  }
}

struct GradcheckResult {
  double worst = 0.0;
  std::int64_t parameters = 0;
  double seconds = 0.0;
};

// Full-loss gradient check: the complete objective (stage losses, sigmoid
// gates without detachment so the gate path is differentiated too, schedule
// weights) against central differences over every trainable parameter.
inline GradcheckResult run_gradcheck(const RunConfig& cfg, double step = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  Model model = build_model(cfg);
  prepare_gradcheck_point(model, cfg.seed);

  SyntheticSpec spec = cfg.data.synthetic;
  spec.image_side = cfg.model.image_side;  // match the model geometry
  spec.sample_count = 10;
  spec.seed = sub_seed(cfg.data.synthetic.seed, hash64("gradcheck"));
  Dataset batch = generate_synthetic(spec);
  std::vector<std::int64_t> idx = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  Tensor images = batch_images(batch, idx);
  auto labels = batch_labels(batch, idx);
  for (auto& y : labels) y %= cfg.model.num_classes;

  // mid-schedule weights: both phases contribute comparable gradient signal
  std::vector<double> alpha = schedule_alpha(static_cast<double>(cfg.schedule.total_epochs) / 2.0, cfg.schedule);
  GateConfig gate = cfg.train.gate;
  gate.detach = false;  // differentiate the gate path as well
  const auto betas = stage_betas(model);

  std::vector<Tensor> params;
  GradcheckResult r;
  for (auto& p : model.registry.entries())
    if (!p.frozen) {
      params.push_back(p.tensor);
      r.parameters += p.tensor.numel();
    }
  auto f = [&] {
    auto fwd = model.forward_all(images);
    auto losses = stage_losses(fwd, labels, betas);
    auto gated = apply_gates(losses, gate);
    return total_loss(gated.gated, alpha);
  };
  r.worst = finite_difference_gradcheck(f, params, step);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace dmpo
