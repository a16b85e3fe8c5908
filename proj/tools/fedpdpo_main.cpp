// Command-line front end: federated PDPO experiments, ablations, theorem
// verification, gradient checking, partition inspection and checkpoint
// evaluation.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fedpdpo/harness.hpp"
#include "fedpdpo/theory.hpp"

namespace {

int cmd_run(const std::string& config_path) {
  auto cfg = fedpdpo::load_experiment_config(config_path);
  fedpdpo::validate_experiment_config(cfg);
  auto summary = fedpdpo::run_experiment(cfg);
  std::cout << fedpdpo::summary_to_json(summary) << std::endl;
  return 0;
}

int cmd_ablate(const std::string& config_path) {
  auto cfg = fedpdpo::load_experiment_config(config_path);
  fedpdpo::validate_experiment_config(cfg);
  auto result = fedpdpo::run_ablation(cfg);
  std::cout << fedpdpo::ablation_to_json(result) << std::endl;
  return 0;
}

int cmd_verify_theorems(std::size_t n, std::uint64_t seed) {
  auto t1 = fedpdpo::verify_theorem1(n, seed);
  auto t2 = fedpdpo::verify_theorem2(n, seed + 1);
  std::vector<fedpdpo::McReport> all = t1.reports;
  all.insert(all.end(), t2.reports.begin(), t2.reports.end());
  std::cout << fedpdpo::reports_to_json(all) << std::endl;
  const bool ok = t1.all_pass && t2.all_pass;
  std::cerr << (ok ? "all cells passed" : "MC verification FAILED") << std::endl;
  return ok ? 0 : 1;
}

int cmd_gradcheck(int dim, double h, double tol) {
  auto reports = fedpdpo::pdpo_gradient_check(dim, h, tol);
  bool ok = true;
  for (const auto& r : reports) {
    std::printf("%-16s max_rel_err=%.3e %s\n", r.group.c_str(), r.max_rel_err,
                r.pass ? "ok" : "FAIL");
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int cmd_partition(const std::string& config_path) {
  auto cfg = fedpdpo::load_experiment_config(config_path);
  fedpdpo::validate_experiment_config(cfg);
  auto ds = fedpdpo::build_dataset(cfg, cfg.seeds.front());
  std::cout << fedpdpo::plan_to_json_string(ds.plan) << std::endl;
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& jsonl_path) {
  auto loaded = fedpdpo::load_model_checkpoint(checkpoint_path);
  auto triples = fedpdpo::load_preference_jsonl(jsonl_path);
  const double acc = fedpdpo::preference_accuracy(loaded.model, loaded.vocab, triples);
  std::printf("preference_accuracy %.6f over %zu triples\n", acc, triples.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated personalized DPO simulator"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run a federated experiment from a config");
  run->add_option("config", config_path, "experiment config JSON")->required();

  std::string ablate_config;
  auto* ablate = app.add_subcommand("ablate", "run the A1/A2/A3 ablation variants");
  ablate->add_option("config", ablate_config, "experiment config JSON")->required();

  std::size_t mc_n = 1000000;
  std::uint64_t mc_seed = 0;
  auto* verify = app.add_subcommand("verify-theorems",
                                    "Monte Carlo checks of the preference theorems");
  verify->add_option("--n", mc_n, "samples per cell");
  verify->add_option("--seed", mc_seed, "base seed");

  int gc_dim = 8;
  double gc_h = 1e-5;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference check of analytic gradients");
  gradcheck->add_option("--dim", gc_dim, "hidden dimension of the probe model");
  gradcheck->add_option("--step", gc_h, "finite difference step");
  gradcheck->add_option("--tol", gc_tol, "max relative error");

  std::string partition_config;
  bool dry_run = false;
  auto* partition = app.add_subcommand("partition", "emit the partition plan as JSON");
  partition->add_option("config", partition_config, "experiment config JSON")->required();
  partition->add_flag("--dry-run", dry_run, "build the plan without training");

  std::string ckpt_path, eval_jsonl;
  auto* eval = app.add_subcommand("eval", "preference accuracy of a checkpoint");
  eval->add_option("checkpoint", ckpt_path, "model checkpoint file")->required();
  eval->add_option("jsonl", eval_jsonl, "preference triples JSONL")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path);
    if (ablate->parsed()) return cmd_ablate(ablate_config);
    if (verify->parsed()) return cmd_verify_theorems(mc_n, mc_seed);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_dim, gc_h, gc_tol);
    if (partition->parsed()) return cmd_partition(partition_config);
    if (eval->parsed()) return cmd_eval(ckpt_path, eval_jsonl);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
