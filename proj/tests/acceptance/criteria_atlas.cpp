#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>

#include "harness.hpp"

namespace acceptance {
namespace {

namespace fs = std::filesystem;

// ---- criterion 6: joint atlas + registration -------------------------------

Result criterion_joint_registration(Ctx& ctx) {
  const nfa::RunResult run = ctx.atlas_model();
  const double d0 = run.manifest["summary"]["dice_init"].get<double>();
  const double d1 = run.manifest["summary"]["dice_trained"].get<double>();

  double worst_nj = 0;
  for (const auto& row : read_csv(run.out_dir / "registration_metrics.csv"))
    if (row.at("variant") == "trained")
      worst_nj = std::max(worst_nj, std::stod(row.at("neg_jacobian_percent")));

  Result r;
  r.pass = d1 - d0 >= 5.0 && worst_nj <= 0.1;
  r.detail = "cohort mean layer Dice " + fmt(d0) + " -> " + fmt(d1) + " (gain " + fmt(d1 - d0) +
             ", need >= 5); worst negative-Jacobian fraction " + fmt(worst_nj, 4) +
             "% (<= 0.1 required)";
  return r;
}

// ---- criterion 7: resolution-consistent inference --------------------------

Result criterion_resolution_consistency(Ctx& ctx) {
  const nfa::RunResult model = ctx.atlas_model();
  const fs::path holdout = ctx.reg_holdout();
  const std::string subject = nfa::load_cohort(holdout).subjects.front().name;

  bool frozen = true;
  double lo = 1e300, hi = -1e300;
  std::string per;
  for (std::int64_t keep : {16, 32, 64}) {
    nlohmann::json cfg;
    cfg["kind"] = "atlas-infer";
    cfg["seed"] = 5;
    cfg["atlas_model"] = (model.out_dir / "atlas.ckpt").string();
    cfg["disp_model"] = (model.out_dir / "disp.ckpt").string();
    cfg["dataset"] = holdout.string();
    cfg["subject"] = subject;
    cfg["keep_slices"] = keep;
    cfg["epochs"] = 80;
    cfg["output_dir"] = "";
    const nfa::RunResult rr = ctx.ensure_run("atlas-infer-" + std::to_string(keep), cfg);
    frozen = frozen && rr.manifest["summary"]["networks_unchanged"].get<bool>();
    const double dice = rr.manifest["summary"]["dice_trained"].get<double>();
    lo = std::min(lo, dice);
    hi = std::max(hi, dice);
    per += (per.empty() ? "" : ", ") + std::to_string(keep) + " slices " + fmt(dice);
  }

  Result r;
  r.pass = frozen && hi - lo < 1.5;
  r.detail = "held-out subject Dice by input resolution: " + per + "; spread " + fmt(hi - lo) +
             " (< 1.5 required), networks " + (frozen ? "unchanged" : "CHANGED");
  return r;
}

// ---- criterion 8: implicit vs explicit atlas -------------------------------

Result criterion_explicit_ablation(Ctx& ctx) {
  nlohmann::json cfg = ctx.atlas_train_cfg();
  cfg["kind"] = "ablation-explicit";
  cfg["keep_slices"] = 16;
  cfg["pretrain_epochs"] = 300;
  cfg["iters"] = 600;
  cfg.erase("atlas_type");
  const nfa::RunResult run = ctx.ensure_run("ablation", cfg);

  const double di = run.manifest["summary"]["dice_implicit"].get<double>();
  const double de = run.manifest["summary"]["dice_explicit"].get<double>();

  const auto rows = read_csv(run.out_dir / "comparison_metrics.csv");
  bool shape = rows.size() == 2;
  for (const auto& row : rows)
    shape = shape && row.count("variant") && row.count("dice") && row.count("assd") &&
            row.count("ssim") && row.count("neg_jacobian_percent");
  const auto timing = read_csv(run.out_dir / "comparison.csv");
  shape = shape && timing.size() == 2 && timing.front().count("seconds");

  Result r;
  r.pass = di >= de - 1.0 && shape;
  r.detail = "cohort Dice at 16 of 64 slices: implicit " + fmt(di) + ", explicit " + fmt(de) +
             " (implicit must stay within 1 point); comparison tables " +
             (shape ? "well-formed" : "MALFORMED");
  return r;
}

// ---- criterion 12: manifest reruns reproduce hashes ------------------------

int run_cli(const std::string& args, std::string* out_text = nullptr) {
  const fs::path tmp = fs::temp_directory_path() / "nfa-acc-cli-out.txt";
  const std::string cmd =
      std::string(NFA_CLI_PATH) + " " + args + " > " + tmp.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (out_text) {
    std::ifstream is(tmp);
    std::stringstream ss;
    ss << is.rdbuf();
    *out_text = ss.str();
  }
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Result criterion_rerun_reproducibility(Ctx& ctx) {
  nlohmann::json interp = ctx.interp_train_cfg();
  interp["epochs"] = 2;
  interp["keep_slices"] = 8;
  interp["latent_dim"] = 16;
  interp["width"] = 32;
  const nfa::RunResult irun = ctx.ensure_run("rerun-interp", interp);

  nlohmann::json atlas = ctx.atlas_train_cfg();
  atlas["latent_dim"] = 8;
  atlas["atlas_width"] = 64;
  atlas["atlas_depth"] = 2;
  atlas["disp_width"] = 32;
  atlas["pretrain_epochs"] = 3;
  atlas["iters"] = 8;
  atlas["coords_per_subject"] = 1024;
  const nfa::RunResult arun = ctx.ensure_run("rerun-atlas", atlas);

  bool pass = true;
  std::string detail;
  for (const auto& [label, run] : {std::pair<std::string, const nfa::RunResult*>{"interp", &irun},
                                   {"atlas", &arun}}) {
    const fs::path redo = run->out_dir.string() + "-re";
    fs::remove_all(redo);
    std::string text;
    const int rc = run_cli("rerun " + (run->out_dir / "manifest.json").string() + " --out " +
                               redo.string() + " --threads 1",
                           &text);
    const bool ok = rc == 0 && text.find("match") != std::string::npos;
    ctx.say(label + " rerun exit " + std::to_string(rc));
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + label + " pipeline " +
              (ok ? "hash-identical" : "MISMATCH (exit " + std::to_string(rc) + ")");
  }

  Result r;
  r.pass = pass;
  r.detail = detail + " under --threads 1";
  return r;
}

}  // namespace

void register_atlas(std::vector<Criterion>& out) {
  out.push_back({6, "joint training beats initial atlas alignment", 2700,
                 criterion_joint_registration});
  out.push_back({7, "registration quality stable across slice counts", 900,
                 criterion_resolution_consistency});
  out.push_back({8, "implicit atlas matches explicit ablation", 1800,
                 criterion_explicit_ablation});
  out.push_back({12, "manifest reruns reproduce artifact hashes", 900,
                 criterion_rerun_reproducibility});
}

}  // namespace acceptance
