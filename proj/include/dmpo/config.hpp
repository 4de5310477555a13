#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dmpo/early_exit.hpp"
#include "dmpo/train.hpp"

namespace dmpo {

// ---------------------------------------------------------------------------
// Run configuration: strict-schema JSON. Unknown keys are rejected with their
// JSON path; omitted fields take documented defaults and are echoed back in
// resolved_config.json so any run can be repeated exactly.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(path + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key " + path + "." + it.key());
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace detail

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx
  SyntheticSpec synthetic;           // sample_count unused; per-split counts below
  std::int64_t train_count = 10000;
  std::int64_t val_count = 2000;
  std::int64_t test_count = 2000;
  bool seed_given = false;           // when false the data seed derives from the run seed
  std::string idx_images, idx_labels;
  std::vector<double> idx_split = {0.8, 0.1, 0.1};

  json to_json() const {
    json j;
    j["source"] = source;
    json s;
    s["base_textures"] = synthetic.base_textures;
    s["glyphs"] = synthetic.glyphs;
    s["image_side"] = synthetic.image_side;
    s["contrast"] = std::vector<double>{synthetic.contrast_lo, synthetic.contrast_hi};
    s["noise_level"] = synthetic.noise_level;
    s["seed"] = synthetic.seed;
    s["train_count"] = train_count;
    s["val_count"] = val_count;
    s["test_count"] = test_count;
    j["synthetic"] = s;
    if (source == "idx") {
      json i;
      i["images"] = idx_images;
      i["labels"] = idx_labels;
      i["split"] = idx_split;
      j["idx"] = i;
    }
    return j;
  }
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir;
  ModelConfig model;
  TrainConfig train;
  LossWeightSchedule schedule;
  SchedulePreset schedule_preset = SchedulePreset::DmpoR2D;
  std::vector<double> custom_start, custom_end;
  DataConfig data;
  ExitPolicy exit_policy;
  std::string eval_split = "test";
  std::string init_checkpoint;
  std::int64_t probe_size = 256;

  json to_json() const {
    json j;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    j["model"] = model.to_json();
    json t;
    t["epochs"] = train.epochs;
    t["batch_size"] = train.batch_size;
    t["mode"] = train_mode_name(train.mode);
    t["learning_rate"] = train.learning_rate;
    t["weight_decay"] = train.weight_decay;
    t["lr_final_fraction"] = train.lr_final_fraction;
    t["dyn_r_weight"] = train.dyn_r_weight;
    t["dyn_r_stage"] = train.dyn_r_stage;
    t["timing"] = train.timing;
    t["init_checkpoint"] = init_checkpoint;
    t["probe_size"] = probe_size;
    json g;
    g["activation"] = gate_activation_name(train.gate.activation);
    g["detach"] = train.gate.detach;
    t["gate"] = g;
    json s;
    s["preset"] = schedule_preset_name(schedule_preset);
    if (schedule_preset == SchedulePreset::Custom) {
      s["start"] = custom_start;
      s["end"] = custom_end;
    }
    t["schedule"] = s;
    j["train"] = t;
    j["data"] = data.to_json();
    json e;
    e["mode"] = exit_mode_name(exit_policy.mode);
    e["threshold"] = exit_policy.threshold;
    e["stage_thresholds"] = exit_policy.stage_thresholds;
    e["budget"] = exit_policy.budget;
    e["forced_stage"] = exit_policy.forced_stage;
    e["eval_split"] = eval_split;
    j["exit"] = e;
    return j;
  }
};

inline RunConfig parse_run_config(const json& j) {
  detail::check_keys(j, "$", {"seed", "output_dir", "model", "train", "data", "exit"});
  RunConfig c;
  c.seed = detail::get_or<std::uint64_t>(j, "seed", 1);
  c.output_dir = detail::get_or<std::string>(j, "output_dir", "");

  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::check_keys(m, "$.model",
                       {"image_side", "patch_side", "channels", "embed_dim", "heads", "mlp_ratio",
                        "stages", "blocks_per_stage", "num_classes", "adapter_rank",
                        "predictor_kinds", "hp_proj_dims", "hp_heads", "hp_conv_enabled",
                        "bypass_rank"});
    ModelConfig d;  // desk defaults
    c.model.image_side = detail::get_or<std::int64_t>(m, "image_side", d.image_side);
    c.model.patch_side = detail::get_or<std::int64_t>(m, "patch_side", d.patch_side);
    c.model.channels = detail::get_or<std::int64_t>(m, "channels", d.channels);
    c.model.embed_dim = detail::get_or<std::int64_t>(m, "embed_dim", d.embed_dim);
    c.model.heads = detail::get_or<std::int64_t>(m, "heads", d.heads);
    c.model.mlp_ratio = detail::get_or<std::int64_t>(m, "mlp_ratio", d.mlp_ratio);
    c.model.stages = detail::get_or<std::int64_t>(m, "stages", d.stages);
    c.model.blocks_per_stage = detail::get_or<std::int64_t>(m, "blocks_per_stage", d.blocks_per_stage);
    c.model.num_classes = detail::get_or<int>(m, "num_classes", d.num_classes);
    c.model.adapter_rank = detail::get_or<std::int64_t>(m, "adapter_rank", d.adapter_rank);
    if (m.contains("predictor_kinds"))
      for (const auto& s : m.at("predictor_kinds"))
        c.model.predictor_kinds.push_back(predictor_kind_from(s.get<std::string>()));
    if (m.contains("hp_proj_dims")) c.model.hp_proj_dims = m.at("hp_proj_dims").get<std::vector<std::int64_t>>();
    c.model.hp_heads = detail::get_or<std::int64_t>(m, "hp_heads", d.hp_heads);
    c.model.hp_conv_enabled = detail::get_or<bool>(m, "hp_conv_enabled", d.hp_conv_enabled);
    c.model.bypass_rank = detail::get_or<std::int64_t>(m, "bypass_rank", d.bypass_rank);
  }
  c.model.fill_defaults();
  try {
    c.model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("$.model: ") + e.what());
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::check_keys(t, "$.train",
                       {"epochs", "batch_size", "mode", "learning_rate", "weight_decay",
                        "lr_final_fraction", "dyn_r_weight", "dyn_r_stage", "timing", "gate",
                        "schedule", "init_checkpoint", "probe_size"});
    c.train.epochs = detail::get_or<std::int64_t>(t, "epochs", c.train.epochs);
    c.train.batch_size = detail::get_or<std::int64_t>(t, "batch_size", c.train.batch_size);
    c.train.mode = train_mode_from(detail::get_or<std::string>(t, "mode", "peft"));
    c.train.learning_rate = detail::get_or<double>(t, "learning_rate", c.train.learning_rate);
    c.train.weight_decay = detail::get_or<double>(t, "weight_decay", c.train.weight_decay);
    c.train.lr_final_fraction = detail::get_or<double>(t, "lr_final_fraction", c.train.lr_final_fraction);
    c.train.dyn_r_weight = detail::get_or<double>(t, "dyn_r_weight", c.train.dyn_r_weight);
    c.train.dyn_r_stage = detail::get_or<std::int64_t>(t, "dyn_r_stage", c.train.dyn_r_stage);
    c.train.timing = detail::get_or<bool>(t, "timing", c.train.timing);
    c.init_checkpoint = detail::get_or<std::string>(t, "init_checkpoint", "");
    c.probe_size = detail::get_or<std::int64_t>(t, "probe_size", 256);
    if (t.contains("gate")) {
      const json& g = t.at("gate");
      detail::check_keys(g, "$.train.gate", {"activation", "detach"});
      c.train.gate.activation = gate_activation_from(detail::get_or<std::string>(g, "activation", "sigmoid"));
      c.train.gate.detach = detail::get_or<bool>(g, "detach", true);
    }
    if (t.contains("schedule")) {
      const json& s = t.at("schedule");
      detail::check_keys(s, "$.train.schedule", {"preset", "start", "end"});
      c.schedule_preset = schedule_preset_from(detail::get_or<std::string>(s, "preset", "dmpo_r2d"));
      if (s.contains("start")) c.custom_start = s.at("start").get<std::vector<double>>();
      if (s.contains("end")) c.custom_end = s.at("end").get<std::vector<double>>();
      if (c.schedule_preset != SchedulePreset::Custom && (!c.custom_start.empty() || !c.custom_end.empty()))
        throw ConfigError("$.train.schedule: start/end are only valid with the custom preset");
    }
  }
  try {
    c.train.validate();
    c.schedule = LossWeightSchedule::make(c.schedule_preset, c.model.stages, c.train.epochs,
                                          c.custom_start, c.custom_end);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("$.train: ") + e.what());
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    detail::check_keys(d, "$.data", {"source", "synthetic", "idx"});
    c.data.source = detail::get_or<std::string>(d, "source", "synthetic");
    if (c.data.source != "synthetic" && c.data.source != "idx")
      throw ConfigError("$.data.source must be synthetic or idx");
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      detail::check_keys(s, "$.data.synthetic",
                         {"base_textures", "glyphs", "image_side", "contrast", "noise_level",
                          "seed", "train_count", "val_count", "test_count"});
      c.data.synthetic.base_textures = detail::get_or<int>(s, "base_textures", c.data.synthetic.base_textures);
      c.data.synthetic.glyphs = detail::get_or<int>(s, "glyphs", c.data.synthetic.glyphs);
      c.data.synthetic.image_side = detail::get_or<std::int64_t>(s, "image_side", c.data.synthetic.image_side);
      if (s.contains("contrast")) {
        auto range = s.at("contrast").get<std::vector<double>>();
        if (range.size() != 2) throw ConfigError("$.data.synthetic.contrast must be [lo, hi]");
        c.data.synthetic.contrast_lo = range[0];
        c.data.synthetic.contrast_hi = range[1];
      }
      c.data.synthetic.noise_level = detail::get_or<double>(s, "noise_level", c.data.synthetic.noise_level);
      if (s.contains("seed")) {
        c.data.synthetic.seed = s.at("seed").get<std::uint64_t>();
        c.data.seed_given = true;
      }
      c.data.train_count = detail::get_or<std::int64_t>(s, "train_count", c.data.train_count);
      c.data.val_count = detail::get_or<std::int64_t>(s, "val_count", c.data.val_count);
      c.data.test_count = detail::get_or<std::int64_t>(s, "test_count", c.data.test_count);
    }
    if (d.contains("idx")) {
      const json& i = d.at("idx");
      detail::check_keys(i, "$.data.idx", {"images", "labels", "split"});
      c.data.idx_images = detail::get_or<std::string>(i, "images", "");
      c.data.idx_labels = detail::get_or<std::string>(i, "labels", "");
      if (i.contains("split")) c.data.idx_split = i.at("split").get<std::vector<double>>();
    }
    if (c.data.source == "idx" && (c.data.idx_images.empty() || c.data.idx_labels.empty()))
      throw ConfigError("$.data.idx requires images and labels paths");
  }
  if (!c.data.seed_given) c.data.synthetic.seed = sub_seed(c.seed, hash64("data"));

  if (j.contains("exit")) {
    const json& e = j.at("exit");
    detail::check_keys(e, "$.exit",
                       {"mode", "threshold", "stage_thresholds", "budget", "forced_stage", "eval_split"});
    c.exit_policy.mode = exit_mode_from(detail::get_or<std::string>(e, "mode", "global_threshold"));
    c.exit_policy.threshold = detail::get_or<double>(e, "threshold", 1.0);
    if (e.contains("stage_thresholds"))
      c.exit_policy.stage_thresholds = e.at("stage_thresholds").get<std::vector<double>>();
    c.exit_policy.budget = detail::get_or<double>(e, "budget", 1.0);
    c.exit_policy.forced_stage = detail::get_or<std::int64_t>(e, "forced_stage", 1);
    c.eval_split = detail::get_or<std::string>(e, "eval_split", "test");
    if (c.eval_split != "train" && c.eval_split != "val" && c.eval_split != "test")
      throw ConfigError("$.exit.eval_split must be train, val or test");
    try {
      c.exit_policy.validate(c.model.stages);
    } catch (const ConfigError& err) {
      throw ConfigError(std::string("$.exit: ") + err.what());
    }
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

inline void write_json_file(const json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace dmpo
