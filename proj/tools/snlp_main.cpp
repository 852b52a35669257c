#include <cstdint>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "snlp/checkpoint.hpp"
#include "snlp/experiment.hpp"
#include "snlp/model.hpp"
#include "snlp/prng.hpp"
#include "snlp/threading.hpp"
#include "snlp/version.hpp"

namespace {

struct RunArgs {
  std::string config;
  std::string ckpt;
  std::string out;
};

void add_run_options(CLI::App* cmd, RunArgs& args) {
  cmd->add_option("--config", args.config, "experiment config (JSON)")->required();
  cmd->add_option("--ckpt", args.ckpt, "model checkpoint")->required();
  cmd->add_option("--out", args.out, "metrics CSV (appended)")->required();
}

snlp::ModelWeights load_and_check(const snlp::ExperimentConfig& cfg, const std::string& ckpt) {
  snlp::ModelWeights w = snlp::load_checkpoint(ckpt);
  snlp::require_model_match(cfg, w);
  return w;
}

void report(const std::vector<snlp::MetricsRow>& rows, const std::string& out) {
  std::cout << "wrote " << rows.size() << " row" << (rows.size() == 1 ? "" : "s") << " to " << out
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  snlp::apply_thread_env();

  CLI::App app{std::string("snlp experiment harness (") + snlp::kArtifactVersion + ")"};
  app.require_subcommand(1);

  auto* init_cmd = app.add_subcommand("init-model", "create a seeded model checkpoint");
  std::string init_config, init_out;
  std::uint64_t init_seed = 0;
  init_cmd->add_option("--config", init_config, "experiment config (JSON)")->required();
  init_cmd->add_option("--out", init_out, "checkpoint path")->required();
  auto* seed_opt = init_cmd->add_option("--seed", init_seed, "override the model seed");

  RunArgs ppl_args, ssd_args, jd_args, ablate_args;
  auto* ppl_cmd = app.add_subcommand("run-ppl", "sequential vs. solver perplexity evaluation");
  add_run_options(ppl_cmd, ppl_args);
  auto* ablate_cmd = app.add_subcommand("ablate", "ordering/propagation/early-exit/"
                                                  "substitution/jacobian sweeps");
  std::string ablate_mode;
  add_run_options(ablate_cmd, ablate_args);
  ablate_cmd
      ->add_option("--mode", ablate_mode, "ordering|propagation|early-exit|substitution|jacobian")
      ->required();
  auto* ssd_cmd = app.add_subcommand("run-ssd", "draft-and-verify decoding evaluation");
  add_run_options(ssd_cmd, ssd_args);
  auto* jd_cmd = app.add_subcommand("run-jd", "sliding-window fixed-point decoding evaluation");
  add_run_options(jd_cmd, jd_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init_cmd) {
      snlp::ExperimentConfig cfg = snlp::ExperimentConfig::load(init_config);
      if (seed_opt->count() > 0) cfg.model_seed = init_seed;
      snlp::Prng prng(cfg.model_seed);
      const snlp::ModelWeights w = snlp::init_model(cfg.model, prng, cfg.branch_gain);
      snlp::save_checkpoint(w, init_out);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%016llx",
                    static_cast<unsigned long long>(snlp::file_content_hash(init_out)));
      std::cout << buf << "\n";
    } else if (*ppl_cmd) {
      const snlp::ExperimentConfig cfg = snlp::ExperimentConfig::load(ppl_args.config);
      const snlp::ModelWeights w = load_and_check(cfg, ppl_args.ckpt);
      const auto rows = snlp::run_ppl(cfg, w);
      snlp::append_rows(ppl_args.out, rows);
      report(rows, ppl_args.out);
    } else if (*ablate_cmd) {
      const snlp::ExperimentConfig cfg = snlp::ExperimentConfig::load(ablate_args.config);
      const snlp::ModelWeights w = load_and_check(cfg, ablate_args.ckpt);
      const auto rows = snlp::run_ablate(cfg, w, ablate_mode);
      snlp::append_rows(ablate_args.out, rows);
      report(rows, ablate_args.out);
    } else if (*ssd_cmd) {
      const snlp::ExperimentConfig cfg = snlp::ExperimentConfig::load(ssd_args.config);
      const snlp::ModelWeights w = load_and_check(cfg, ssd_args.ckpt);
      const auto rows = snlp::run_ssd(cfg, w);
      snlp::append_rows(ssd_args.out, rows);
      report(rows, ssd_args.out);
    } else if (*jd_cmd) {
      const snlp::ExperimentConfig cfg = snlp::ExperimentConfig::load(jd_args.config);
      const snlp::ModelWeights w = load_and_check(cfg, jd_args.ckpt);
      const auto rows = snlp::run_jd(cfg, w);
      snlp::append_rows(jd_args.out, rows);
      report(rows, jd_args.out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
