#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dmpo/gradcheck.hpp"
#include "dmpo/train.hpp"

using namespace dmpo;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_side = 16;
  c.patch_side = 4;
  c.channels = 1;
  c.embed_dim = 16;
  c.heads = 4;
  c.mlp_ratio = 2;
  c.stages = 2;
  c.blocks_per_stage = 1;
  c.num_classes = 4;
  c.adapter_rank = 2;
  c.predictor_kinds = {PredictorKind::HighOrder, PredictorKind::Linear};
  c.hp_proj_dims = {4};
  c.hp_heads = 2;
  c.hp_conv_enabled = true;
  c.bypass_rank = 2;
  return c;
}

SyntheticSpec tiny_data(std::int64_t n, std::uint64_t seed) {
  SyntheticSpec s;
  s.base_textures = 2;
  s.glyphs = 2;
  s.image_side = 16;
  s.noise_level = 0.05;
  s.sample_count = n;
  s.seed = seed;
  return s;
}

std::vector<Tensor> losses_for(std::vector<double> a, std::vector<double> b = {}) {
  std::vector<Tensor> out;
  out.push_back(Tensor::from({static_cast<std::int64_t>(a.size())}, a));
  if (!b.empty()) out.push_back(Tensor::from({static_cast<std::int64_t>(b.size())}, b));
  return out;
}

}  // namespace

TEST(Schedule, TwoPhaseDefaults) {
  auto s = LossWeightSchedule::make(SchedulePreset::DmpoR2D, 4, 30);
  auto start = schedule_alpha(0.0, s);
  EXPECT_EQ(start, (std::vector<double>{0.01, 0.01, 1.0, 2.0}));
  auto end = schedule_alpha(30.0, s);
  EXPECT_EQ(end, (std::vector<double>{1.5, 1.0, 0.1, 0.1}));
  auto mid = schedule_alpha(15.0, s);
  ASSERT_EQ(mid.size(), 4u);
  EXPECT_NEAR(mid[0], 0.755, 1e-12);
  EXPECT_NEAR(mid[1], 0.505, 1e-12);
  EXPECT_NEAR(mid[2], 0.55, 1e-12);
  EXPECT_NEAR(mid[3], 1.05, 1e-12);
}

TEST(Schedule, CrossingAndMonotone) {
  auto s = LossWeightSchedule::make(SchedulePreset::DmpoR2D, 4, 10);
  auto a0 = schedule_alpha(0.0, s);
  auto aE = schedule_alpha(10.0, s);
  EXPECT_LT(std::max(a0[0], a0[1]), std::min(a0[2], a0[3]));  // early < deep at start
  EXPECT_GT(std::min(aE[0], aE[1]), std::max(aE[2], aE[3]));  // early > deep at end
  for (int i = 0; i < 4; ++i) {
    double prev = schedule_alpha(0.0, s)[static_cast<std::size_t>(i)];
    for (double e = 1.0; e <= 10.0; e += 1.0) {
      double cur = schedule_alpha(e, s)[static_cast<std::size_t>(i)];
      if (s.end[static_cast<std::size_t>(i)] >= s.start[static_cast<std::size_t>(i)])
        EXPECT_GE(cur, prev);
      else
        EXPECT_LE(cur, prev);
      prev = cur;
    }
  }
  EXPECT_THROW(schedule_alpha(10.5, s), IndexError);
  EXPECT_THROW(schedule_alpha(-0.5, s), IndexError);
}

TEST(Schedule, TableFormulaPresets) {
  for (std::int64_t S : {2, 3, 4, 6}) {
    auto u1 = LossWeightSchedule::make(SchedulePreset::Uniform1, S, 5);
    auto us = LossWeightSchedule::make(SchedulePreset::UniformInvS, S, 5);
    auto cl = LossWeightSchedule::make(SchedulePreset::CalmLinear, S, 5);
    double denom = 0.0;
    for (std::int64_t j = 1; j <= S; ++j) denom += static_cast<double>(j);
    for (std::int64_t i = 0; i < S; ++i) {
      EXPECT_EQ(schedule_alpha(3.0, u1)[static_cast<std::size_t>(i)], 1.0);
      EXPECT_EQ(schedule_alpha(3.0, us)[static_cast<std::size_t>(i)], 1.0 / static_cast<double>(S));
      EXPECT_EQ(schedule_alpha(3.0, cl)[static_cast<std::size_t>(i)],
                static_cast<double>(i + 1) / denom);
    }
  }
}

TEST(Schedule, ConstantPresetsIgnoreEpoch) {
  auto ca = LossWeightSchedule::make(SchedulePreset::ConstantAscending, 4, 8);
  EXPECT_EQ(schedule_alpha(0.0, ca), schedule_alpha(8.0, ca));
  EXPECT_EQ(schedule_alpha(0.0, ca), (std::vector<double>{0.01, 0.01, 1.0, 2.0}));
  auto cd = LossWeightSchedule::make(SchedulePreset::ConstantDescending, 4, 8);
  EXPECT_EQ(schedule_alpha(5.0, cd), (std::vector<double>{1.5, 1.0, 0.1, 0.1}));
  auto d2r = LossWeightSchedule::make(SchedulePreset::D2R, 4, 8);
  EXPECT_EQ(schedule_alpha(0.0, d2r), (std::vector<double>{1.5, 1.0, 0.1, 0.1}));
  EXPECT_EQ(schedule_alpha(8.0, d2r), (std::vector<double>{0.01, 0.01, 1.0, 2.0}));
}

TEST(Gates, FirstStagePassThroughAndClosedForms) {
  auto losses = losses_for({0.0, std::log(3.0), 2.0}, {1.0, 1.0, 1.0});
  GateConfig gate;  // sigmoid, detached
  auto out = apply_gates(losses, gate);
  EXPECT_EQ(out.gated[0].value(), losses[0].value());  // stage 1 untouched
  // factors sigma(0) = 0.5 and sigma(ln 3) = 0.75
  EXPECT_NEAR(out.factors[1][0], 0.5, 1e-12);
  EXPECT_NEAR(out.factors[1][1], 0.75, 1e-12);
  for (double f : out.factors[1]) {
    EXPECT_GT(f, 0.0);
    EXPECT_LT(f, 1.0);
  }
  // gated loss is strictly below the raw loss when the raw loss is positive
  for (std::size_t b = 0; b < 3; ++b)
    EXPECT_LT(out.gated[1].value()[b], losses[1].value()[b]);
}

TEST(Gates, NoneAndIdentityAndTanh) {
  auto losses = losses_for({0.5, 1.5}, {2.0, 0.25});
  GateConfig none{GateActivation::None, true};
  auto n = apply_gates(losses, none);
  EXPECT_EQ(n.gated[1].value(), losses[1].value());

  GateConfig ident{GateActivation::Identity, true};
  auto i = apply_gates(losses, ident);
  EXPECT_DOUBLE_EQ(i.gated[1].value()[0], 0.5 * 2.0);
  EXPECT_DOUBLE_EQ(i.gated[1].value()[1], 1.5 * 0.25);

  GateConfig th{GateActivation::Tanh, true};
  auto t = apply_gates(losses, th);
  EXPECT_NEAR(t.gated[1].value()[0], std::tanh(0.5) * 2.0, 1e-15);
}

TEST(Gates, SoftmaxOverStagesAllEqualGivesFactorOne) {
  auto losses = losses_for({0.7, 0.7}, {0.7, 0.7});
  losses.push_back(Tensor::from({2}, {0.7, 0.7}));
  GateConfig gate{GateActivation::SoftmaxOverStages, true};
  auto out = apply_gates(losses, gate);
  for (std::size_t s = 1; s < 3; ++s)
    for (double f : out.factors[s]) EXPECT_NEAR(f, 1.0, 1e-12);
}

TEST(Gates, TotalLossHandCase) {
  // S=2, B=1, losses [1,2], sigmoid gate, alpha [0.5, 2]:
  // 0.5*1 + 2*sigma(1)*2 = 3.424235...
  auto losses = losses_for({1.0}, {2.0});
  auto gated = apply_gates(losses, GateConfig{});
  Tensor total = total_loss(gated.gated, {0.5, 2.0});
  EXPECT_NEAR(total.item(), 0.5 + 4.0 / (1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(total.item(), 3.424235, 1e-6);
}

TEST(Gates, UniformOneWithoutGatesIsPlainSum) {
  auto losses = losses_for({1.0, 3.0}, {2.0, 4.0});
  auto gated = apply_gates(losses, GateConfig{GateActivation::None, true});
  Tensor total = total_loss(gated.gated, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(total.item(), 2.0 + 3.0);  // sum of per-stage means
}

TEST(Gates, DetachedGradientEqualsFrozenCoefficientGradient) {
  // tape gradient with detached gates vs finite differences of the loss with
  // the gate coefficients frozen at their current values
  ModelConfig c = tiny_config();
  Model m = Model::build(c, 7);
  // move zero-init bypasses and small classifiers to healthy magnitudes so
  // no checked parameter has a gradient near the FD cancellation floor
  SplitMix64 prng(77);
  for (auto& p : m.registry.entries())
    if (p.name.find("bypass.") != std::string::npos || p.name.find("linear.weight") != std::string::npos ||
        p.name.find("cls.weight") != std::string::npos)
      for (auto& v : p.tensor.value()) v += prng.next_normal() * 0.3;
    else if (p.name.find(".beta") != std::string::npos)
      p.tensor.value()[0] = 4.0;  // amplifies gradients over the FD noise floor
  Dataset ds = generate_synthetic(tiny_data(6, 21));
  std::vector<std::int64_t> idx = {0, 1, 2, 3, 4, 5};
  Tensor images = batch_images(ds, idx);
  auto labels = batch_labels(ds, idx);
  const std::vector<double> alpha = {0.7, 1.3};
  const auto betas = stage_betas(m);

  // capture frozen coefficients at the base point
  std::vector<std::vector<double>> frozen;
  {
    auto fwd = m.forward_all(images);
    auto losses = stage_losses(fwd, labels, betas);
    frozen = apply_gates(losses, GateConfig{}).factors;
  }

  // analytic gradients through the detached gate
  std::vector<Tensor> params;
  for (auto& p : m.registry.entries())
    if (p.name.rfind("predictors.", 0) == 0 && p.name.find("beta") == std::string::npos &&
        p.name.find("proj") == std::string::npos && p.name.find("conv") == std::string::npos)
      params.push_back(p.tensor);
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    auto fwd = m.forward_all(images);
    auto losses = stage_losses(fwd, labels, betas);
    auto gated = apply_gates(losses, GateConfig{});
    Tensor total = total_loss(gated.gated, alpha);
    tape.backward(total);
    for (auto& p : params) analytic.push_back(p.has_grad() ? p.node()->grad : std::vector<double>(p.value().size(), 0.0));
  }

  // finite differences of the frozen-coefficient objective
  auto frozen_objective = [&] {
    auto fwd = m.forward_all(images);
    auto losses = stage_losses(fwd, labels, betas);
    double total = 0.0;
    for (std::size_t s = 0; s < losses.size(); ++s) {
      const auto& lv = losses[s].value();
      for (std::size_t b = 0; b < lv.size(); ++b) total += alpha[s] * frozen[s][b] * lv[b];
    }
    return total / static_cast<double>(labels.size());
  };
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& vals = params[t].value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = frozen_objective();
      vals[i] = saved - h;
      const double down = frozen_objective();
      vals[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::fabs(fd), std::fabs(analytic[t][i]), 1e-8});
      worst = std::max(worst, std::fabs(fd - analytic[t][i]) / denom);
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(DynR, ZeroForIdenticalAndHandCase) {
  Tensor a = Tensor::from({1, 2}, {1.0, 3.0});
  Tensor b = Tensor::from({1, 2}, {2.0, 4.0});
  EXPECT_DOUBLE_EQ(dyn_r_regularizer({a}, {a}, 1).item(), 0.0);
  EXPECT_DOUBLE_EQ(dyn_r_regularizer({a}, {b}, 1).item(), 1.0);  // both elements differ by 1
  EXPECT_THROW(dyn_r_regularizer({a}, {b}, 2), IndexError);
}

TEST(Fit, ZeroLearningRateLeavesParametersUnchanged) {
  ModelConfig c = tiny_config();
  Model m = Model::build(c, 3);
  Dataset train = generate_synthetic(tiny_data(24, 5));
  Dataset val = generate_synthetic(tiny_data(12, 6));
  std::vector<std::vector<double>> before;
  for (auto& p : m.registry.entries()) before.push_back(p.tensor.value());
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.mode = TrainMode::Full;
  tc.learning_rate = 0.0;
  auto sched = LossWeightSchedule::make(SchedulePreset::Uniform1, 2, tc.epochs);
  auto metrics = fit(m, train, val, tc, sched);
  ASSERT_EQ(metrics.size(), 1u);
  EXPECT_EQ(metrics[0].alpha, (std::vector<double>{1.0, 1.0}));
  std::size_t i = 0;
  for (auto& p : m.registry.entries()) EXPECT_EQ(p.tensor.value(), before[i++]) << p.name;
}

TEST(Fit, DeterministicAcrossRuns) {
  auto run = [&] {
    ModelConfig c = tiny_config();
    Model m = Model::build(c, 11);
    m.freeze_backbone();
    m.attach_adapters(2, 11);
    Dataset train = generate_synthetic(tiny_data(32, 15));
    Dataset val = generate_synthetic(tiny_data(16, 16));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 99;
    tc.timing = false;
    auto sched = LossWeightSchedule::make(SchedulePreset::DmpoR2D, 2, tc.epochs);
    std::ostringstream metrics;
    fit(m, train, val, tc, sched, &metrics);
    std::string params;
    for (auto& p : m.registry.entries())
      params.append(reinterpret_cast<const char*>(p.tensor.value().data()),
                    p.tensor.value().size() * sizeof(double));
    return std::make_pair(metrics.str(), params);
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);    // metrics stream bitwise identical
  EXPECT_EQ(a.second, b.second);  // parameters bitwise identical
}

TEST(Fit, FrozenBackboneBytesUnchanged) {
  ModelConfig c = tiny_config();
  Model m = Model::build(c, 17);
  m.freeze_backbone();
  m.attach_adapters(2, 17);
  const std::uint64_t before = m.registry.frozen_bytes_hash();
  Dataset train = generate_synthetic(tiny_data(40, 25));
  Dataset val = generate_synthetic(tiny_data(12, 26));
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  auto sched = LossWeightSchedule::make(SchedulePreset::DmpoR2D, 2, tc.epochs);
  fit(m, train, val, tc, sched);
  EXPECT_EQ(m.registry.frozen_bytes_hash(), before);
}

TEST(Fit, DynRZeroWeightBitwiseIdenticalToDisabled) {
  auto run = [&](double w) {
    ModelConfig c = tiny_config();
    Model m = Model::build(c, 19);
    m.freeze_backbone();
    m.attach_adapters(2, 19);
    Dataset train = generate_synthetic(tiny_data(24, 33));
    Dataset val = generate_synthetic(tiny_data(8, 34));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 12;
    tc.timing = false;
    tc.dyn_r_weight = w;
    auto sched = LossWeightSchedule::make(SchedulePreset::Uniform1, 2, tc.epochs);
    std::ostringstream metrics;
    fit(m, train, val, tc, sched, &metrics);
    return metrics.str();
  };
  EXPECT_EQ(run(0.0), run(0.0));
  // a positive weight must change training (sanity that the path is live)
  EXPECT_NE(run(0.0), run(0.5));
}

TEST(Fit, NonFiniteLossAbortsWithDiagnostics) {
  ModelConfig c = tiny_config();
  Model m = Model::build(c, 23);
  // blow up the classifier so exp overflows the softmax path into NaN territory
  for (auto& p : m.registry.entries())
    if (p.name.find("linear.weight") != std::string::npos)
      for (auto& v : p.tensor.value()) v = 1e155;
  for (auto& p : m.registry.entries())
    if (p.name.find("bypass.up") != std::string::npos)
      for (auto& v : p.tensor.value()) v = 1e155;
  Dataset train = generate_synthetic(tiny_data(16, 41));
  Dataset val = generate_synthetic(tiny_data(8, 42));
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.mode = TrainMode::Full;
  auto sched = LossWeightSchedule::make(SchedulePreset::Uniform1, 2, tc.epochs);
  try {
    fit(m, train, val, tc, sched);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos);
    EXPECT_NE(msg.find("batch"), std::string::npos);
  }
}

TEST(Fit, MetricsJsonRoundTrip) {
  EpochMetrics m;
  m.epoch = 3;
  m.alpha = {0.5, 1.5};
  m.train_loss = {1.25, 0.75};
  m.gate_mean = {1.0, 0.6};
  m.val_acc = {0.25, 0.5};
  m.beta = {1.0, 1.1};
  m.seconds = 2.5;
  m.cos_ref = {0.9, 0.8};
  m.cos_bypass = {1.0, 0.95};
  auto j = m.to_json();
  EXPECT_EQ(j.at("epoch"), 3);
  auto back = EpochMetrics::from_json(json::parse(j.dump()));
  EXPECT_EQ(back.alpha, m.alpha);
  EXPECT_EQ(back.cos_bypass, m.cos_bypass);
  EXPECT_DOUBLE_EQ(back.weighted_total(), 0.5 * 1.25 + 1.5 * 0.75);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
