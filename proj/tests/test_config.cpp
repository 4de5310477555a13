#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dmpo/runner.hpp"

using namespace dmpo;

namespace {

json micro_json(const std::string& out) {
  json j;
  j["seed"] = 7;
  j["output_dir"] = out;
  j["model"] = {{"image_side", 16}, {"patch_side", 4},  {"embed_dim", 16},
                {"heads", 4},       {"stages", 2},      {"blocks_per_stage", 1},
                {"num_classes", 4}, {"adapter_rank", 2}, {"hp_proj_dims", json::array({4})},
                {"predictor_kinds", json::array({"high_order", "linear"})}, {"bypass_rank", 2}};
  j["train"] = {{"epochs", 2}, {"batch_size", 8}, {"mode", "full"}, {"timing", false}, {"probe_size", 8}};
  j["data"] = {{"source", "synthetic"},
               {"synthetic", {{"base_textures", 2}, {"glyphs", 2}, {"image_side", 16},
                              {"train_count", 32}, {"val_count", 16}, {"test_count", 16}}}};
  return j;
}

}  // namespace

TEST(Config, MinimalConfigFillsDeskDefaults) {
  RunConfig c = parse_run_config(json::object());
  EXPECT_EQ(c.model.stages, 4);
  EXPECT_EQ(c.model.blocks_per_stage, 2);
  EXPECT_EQ(c.model.embed_dim, 64);
  EXPECT_EQ(c.schedule_preset, SchedulePreset::DmpoR2D);
  EXPECT_EQ(c.train.gate.activation, GateActivation::Sigmoid);
  EXPECT_TRUE(c.train.gate.detach);
  ASSERT_EQ(c.model.predictor_kinds.size(), 4u);
  EXPECT_EQ(c.model.predictor_kinds[0], PredictorKind::HighOrder);
  EXPECT_EQ(c.model.predictor_kinds[1], PredictorKind::HighOrder);
  EXPECT_EQ(c.model.predictor_kinds[2], PredictorKind::Linear);
  EXPECT_EQ(c.model.predictor_kinds[3], PredictorKind::Linear);
  EXPECT_EQ(c.model.hp_proj_dims, (std::vector<std::int64_t>{16, 8}));
}

TEST(Config, UnknownKeyRejectedWithPath) {
  json j;
  j["model"] = {{"stagess", 4}};
  try {
    parse_run_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("$.model.stagess"), std::string::npos);
  }
  json j2;
  j2["tran"] = {{"epochs", 3}};
  try {
    parse_run_config(j2);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("$.tran"), std::string::npos);
  }
}

TEST(Config, ResolvedRoundTrip) {
  RunConfig c = parse_run_config(micro_json("/tmp/dmpo_cfg_rt"));
  json resolved = c.to_json();
  RunConfig back = parse_run_config(resolved);
  EXPECT_EQ(back.to_json(), resolved);  // fixed point after one resolution
  EXPECT_EQ(back.data.synthetic.seed, c.data.synthetic.seed);
  EXPECT_EQ(back.schedule.start, c.schedule.start);
}

TEST(Config, InvalidValuesRejected) {
  json j;
  j["model"] = {{"stages", 0}};
  EXPECT_THROW(parse_run_config(j), ConfigError);
  json j2;
  j2["exit"] = {{"mode", "budget"}, {"budget", 1.5}};
  EXPECT_THROW(parse_run_config(j2), ConfigError);
  json j3;
  j3["train"] = {{"schedule", {{"preset", "uniform_1"}, {"start", json::array({1.0})}}}};
  EXPECT_THROW(parse_run_config(j3), ConfigError);
}

TEST(Runner, TrainEvalCalibrateProbeFlow) {
  const std::string out = "/tmp/dmpo_runner_flow";
  std::filesystem::remove_all(out);
  RunConfig cfg = parse_run_config(micro_json(out));

  auto trained = run_train(cfg);
  EXPECT_TRUE(std::filesystem::exists(out + "/resolved_config.json"));
  EXPECT_TRUE(std::filesystem::exists(out + "/metrics.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(out + "/checkpoint.bin"));
  EXPECT_EQ(trained.metrics.size(), 2u);
  EXPECT_FALSE(trained.metrics[0].cos_bypass.empty());

  // rerunning from the resolved config reproduces metrics bitwise
  {
    RunConfig again = parse_run_config(json::parse(std::ifstream(out + "/resolved_config.json")));
    const std::string out2 = out + "_repeat";
    std::filesystem::remove_all(out2);
    again.output_dir = out2;
    run_train(again);
    std::ifstream a(out + "/metrics.jsonl"), b(out2 + "/metrics.jsonl");
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    EXPECT_EQ(sa, sb);
    std::ifstream ca(out + "/checkpoint.bin", std::ios::binary), cb(out2 + "/checkpoint.bin", std::ios::binary);
    std::string csa((std::istreambuf_iterator<char>(ca)), std::istreambuf_iterator<char>());
    std::string csb((std::istreambuf_iterator<char>(cb)), std::istreambuf_iterator<char>());
    EXPECT_EQ(csa, csb);
    std::filesystem::remove_all(out2);
  }

  // forced-stage eval equals library-level forced accuracy
  cfg.exit_policy = ExitPolicy::forced(2);
  EvalReport r = run_eval(cfg);
  EXPECT_TRUE(std::filesystem::exists(out + "/eval_report.json"));
  EXPECT_EQ(r.exit_counts.back(), 16);

  cfg.exit_policy.mode = ExitMode::Budget;
  cfg.exit_policy.budget = 1.0;
  auto cal = run_calibrate(cfg);
  EXPECT_TRUE(std::filesystem::exists(out + "/calibration.json"));
  EXPECT_TRUE(std::filesystem::exists(out + "/confidences.csv"));
  EXPECT_LE(cal.achieved_fraction, 1.0);

  json probe = run_probe(cfg, 2);
  EXPECT_TRUE(std::filesystem::exists(out + "/probe_report.json"));
  EXPECT_TRUE(std::filesystem::exists(out + "/heatmaps/sample0_stage1_pre.pgm"));
  EXPECT_TRUE(std::filesystem::exists(out + "/heatmaps/sample0_stage2_post.pgm"));
  ASSERT_EQ(probe.at("cos_ref").size(), 2u);

  // eval without a checkpoint reports a file error
  RunConfig missing = parse_run_config(micro_json("/tmp/dmpo_runner_missing"));
  std::filesystem::remove_all("/tmp/dmpo_runner_missing");
  std::filesystem::create_directories("/tmp/dmpo_runner_missing");
  EXPECT_THROW(run_eval(missing), IoError);
  std::filesystem::remove_all("/tmp/dmpo_runner_missing");
  std::filesystem::remove_all(out);
}

TEST(Runner, GradcheckMicroModelPasses) {
  RunConfig cfg = parse_run_config(micro_json("/tmp/dmpo_gradcheck_unused"));
  auto r = run_gradcheck(cfg);
  EXPECT_LT(r.worst, 1e-4);
  EXPECT_GT(r.parameters, 0);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
