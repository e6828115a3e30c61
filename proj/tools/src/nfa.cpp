#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "nfa/experiment.hpp"

namespace {

int cmd_validate(const std::string& config_path) {
  const auto cfg = nfa::load_experiment_config(config_path);
  const auto diags = nfa::validate_experiment(cfg);
  for (const auto& d : diags) std::cout << d.field << ": " << d.message << "\n";
  return diags.empty() ? 0 : 2;
}

int cmd_run(const std::string& config_path, const nfa::RunOptions& opt) {
  const auto cfg = nfa::load_experiment_config(config_path);
  const auto res = nfa::run_experiment(cfg, opt);
  std::cout << (res.out_dir / "manifest.json").string() << "\n";
  return 0;
}

int cmd_rerun(const std::string& manifest_path, const nfa::RunOptions& opt) {
  const auto res = nfa::rerun_from_manifest(manifest_path, opt);
  if (res.ok) {
    std::cout << "all " << res.run.manifest["artifacts"].size()
              << " deterministic artifacts match\n";
    return 0;
  }
  for (const auto& name : res.mismatched) std::cout << "mismatch: " << name << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"implicit neural fields for anisotropic volumes"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir;
  std::uint64_t seed = 0;
  int threads = 1;

  auto* run = app.add_subcommand("run", "execute an experiment config and write artifacts");
  run->add_option("config", config_path, "JSON experiment config")->required();
  run->add_option("--out", out_dir, "override the config's output_dir");
  auto* seed_opt = run->add_option("--seed", seed, "override the config's seed");
  run->add_option("--threads", threads, "thread cap; 1 is the reproducibility reference")
      ->envname("NFA_THREADS");

  auto* val = app.add_subcommand("validate", "check a config and list violations; no side effects");
  val->add_option("config", config_path, "JSON experiment config")->required();

  auto* rerun = app.add_subcommand("rerun", "re-execute a manifest and compare artifact hashes");
  rerun->add_option("manifest", manifest_path, "manifest.json of a previous run")->required();
  rerun->add_option("--out", out_dir, "output directory for the re-run")->required();
  rerun->add_option("--threads", threads, "thread cap; 1 is the reproducibility reference")
      ->envname("NFA_THREADS");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (val->parsed()) return cmd_validate(config_path);
    nfa::RunOptions opt;
    opt.output_dir = out_dir;
    if (seed_opt->count() > 0) opt.seed = seed;
    opt.threads = threads;
    opt.progress = &std::cerr;
    if (run->parsed()) return cmd_run(config_path, opt);
    return cmd_rerun(manifest_path, opt);
  } catch (const nfa::ConfigError& e) {
    for (const auto& d : e.diagnostics()) std::cerr << d.field << ": " << d.message << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
