// Command-line front door for the early-exit training laboratory.
//
//   dmpo train     --config cfg.json --out runs/exp1
//   dmpo eval      --config cfg.json --out runs/exp1 [--threshold t | --stage k | --budget r]
//   dmpo calibrate --config cfg.json --out runs/exp1 --budget 0.3
//   dmpo probe     --config cfg.json --out runs/exp1
//   dmpo flops     [--config cfg.json]
//   dmpo gradcheck [--config cfg.json]
//
// Exit status: 0 success, 1 config error, 2 runtime/numerical error,
// 3 gradient check above tolerance.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "dmpo/runner.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  double budget = -1.0;
  double threshold = -1.0;
  std::int64_t stage = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

dmpo::RunConfig resolve(const CliOptions& opt) {
  dmpo::RunConfig cfg = opt.config_path.empty() ? dmpo::parse_run_config(dmpo::json::object())
                                                : dmpo::load_config(opt.config_path);
  if (opt.seed_set) {
    cfg.seed = opt.seed;
    if (!cfg.data.seed_given) cfg.data.synthetic.seed = dmpo::sub_seed(cfg.seed, dmpo::hash64("data"));
  }
  if (!opt.out_dir.empty()) cfg.output_dir = opt.out_dir;
  if (opt.budget >= 0.0) {
    cfg.exit_policy.mode = dmpo::ExitMode::Budget;
    cfg.exit_policy.budget = opt.budget;
  }
  if (opt.threshold >= 0.0) {
    cfg.exit_policy.mode = dmpo::ExitMode::GlobalThreshold;
    cfg.exit_policy.threshold = opt.threshold;
  }
  if (opt.stage > 0) {
    cfg.exit_policy.mode = dmpo::ExitMode::ForcedStage;
    cfg.exit_policy.forced_stage = opt.stage;
  }
  cfg.exit_policy.validate(cfg.model.stages);
  return cfg;
}

int do_train(const CliOptions& opt) {
  dmpo::RunConfig cfg = resolve(opt);
  auto out = dmpo::run_train(cfg);
  const auto& last = out.metrics.back();
  std::printf("trained %lld epochs; final per-stage val acc:", static_cast<long long>(cfg.train.epochs));
  for (double a : last.val_acc) std::printf(" %.4f", a);
  std::printf("\nartifacts in %s\n", cfg.output_dir.c_str());
  return 0;
}

int do_eval(const CliOptions& opt) {
  dmpo::RunConfig cfg = resolve(opt);
  dmpo::ensure_output_dir(cfg);
  dmpo::EvalReport r = dmpo::run_eval(cfg);
  std::printf("accuracy %.4f  mean FLOPs %.3e (%.4f of full)  exits:", r.overall_accuracy,
              r.mean_flops, r.mean_flops_fraction);
  for (auto n : r.exit_counts) std::printf(" %lld", static_cast<long long>(n));
  std::printf("\nreport: %s/eval_report.json\n", cfg.output_dir.c_str());
  return 0;
}

int do_calibrate(const CliOptions& opt) {
  dmpo::RunConfig cfg = resolve(opt);
  if (cfg.exit_policy.mode != dmpo::ExitMode::Budget)
    throw dmpo::ConfigError("calibrate needs a budget (--budget or exit.mode=budget)");
  dmpo::ensure_output_dir(cfg);
  auto r = dmpo::run_calibrate(cfg);
  std::printf("budget %.3f -> tau %.6f (achieved fraction %.4f on the calibration split)\n",
              r.budget, r.tau, r.achieved_fraction);
  return 0;
}

int do_probe(const CliOptions& opt) {
  dmpo::RunConfig cfg = resolve(opt);
  dmpo::ensure_output_dir(cfg);
  dmpo::json r = dmpo::run_probe(cfg);
  std::printf("%s\n", r.dump(2).c_str());
  return 0;
}

int do_flops(const CliOptions& opt) {
  dmpo::RunConfig cfg = resolve(opt);
  dmpo::json j = dmpo::flops_table(cfg.model);
  std::printf("patch embed : %.4e\nblock       : %.4e\n", j["patch_embed"].get<double>(),
              j["block"].get<double>());
  const auto& cum = j["cumulative"];
  const auto& frac = j["fraction"];
  for (std::size_t s = 0; s < cum.size(); ++s)
    std::printf("exit %zu      : %.4e  (%.4f of full)\n", s + 1, cum[s].get<double>(),
                frac[s].get<double>());
  if (!cfg.output_dir.empty()) {
    dmpo::ensure_output_dir(cfg);
    dmpo::write_json_file(j, cfg.output_dir + "/flops.json");
  }
  return 0;
}

int do_gradcheck(const CliOptions& opt) {
  dmpo::RunConfig cfg = resolve(opt);
  auto r = dmpo::run_gradcheck(cfg);
  std::printf("gradcheck: worst relative error %.3e over %lld parameters (%.1f s)\n", r.worst,
              static_cast<long long>(r.parameters), r.seconds);
  if (!(r.worst < 1e-4)) {
    std::fprintf(stderr, "gradcheck FAILED: %.3e >= 1e-4\n", r.worst);
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"early-exit transformer laboratory"};
  app.require_subcommand(1);
  CliOptions opt;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config_path, "JSON run configuration");
    cmd->add_option("--out", opt.out_dir, "output directory");
    cmd->add_option("--seed", opt.seed, "top-level seed override")->each([&](const std::string&) {
      opt.seed_set = true;
    });
  };

  CLI::App* train = app.add_subcommand("train", "fit a model, write checkpoint and metrics");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained checkpoint under an exit policy");
  add_common(eval);
  eval->add_option("--budget", opt.budget, "FLOPs budget in (0,1]; calibrates on the val split");
  eval->add_option("--threshold", opt.threshold, "global confidence threshold in [0,1]");
  eval->add_option("--stage", opt.stage, "force every sample to exit at this stage");
  CLI::App* calibrate = app.add_subcommand("calibrate", "pick a global threshold for a FLOPs budget");
  add_common(calibrate);
  calibrate->add_option("--budget", opt.budget, "FLOPs budget in (0,1]");
  CLI::App* probe = app.add_subcommand("probe", "decoupling diagnostics and token heat maps");
  add_common(probe);
  CLI::App* flops = app.add_subcommand("flops", "print the analytic FLOPs table");
  add_common(flops);
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
  add_common(gradcheck);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return do_train(opt);
    if (eval->parsed()) return do_eval(opt);
    if (calibrate->parsed()) return do_calibrate(opt);
    if (probe->parsed()) return do_probe(opt);
    if (flops->parsed()) return do_flops(opt);
    if (gradcheck->parsed()) return do_gradcheck(opt);
  } catch (const dmpo::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  }
  return 1;
}
