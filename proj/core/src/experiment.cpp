#include "nfa/experiment.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "nfa/analysis.hpp"
#include "nfa/interp.hpp"
#include "nfa/metrics.hpp"
#include "nfa/phantom.hpp"
#include "nfa/sha256.hpp"
#include "nfa/volio.hpp"

namespace nfa {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr const char* kNfaVersion = "0.1.0";

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

const std::set<std::string>& known_kinds() {
  static const std::set<std::string> k = {
      "interp-train", "interp-infer", "interp-eval",      "atlas-train",      "atlas-infer",
      "phantom-gen",  "metrics",      "latent-pca",       "ablation-explicit"};
  return k;
}

// ---- schema helpers --------------------------------------------------------

/// Walks a config object: every accessor marks its key as recognized and
/// type-checks the value; finish() reports the leftovers as unknown keys.
class Schema {
 public:
  Schema(const json& cfg, std::vector<Diagnostic>& out) : cfg_(cfg), out_(out) {
    seen_.insert("kind");
  }

  void diag(const std::string& field, const std::string& message) {
    out_.push_back({field, message});
  }

  const json* get(const char* key) {
    seen_.insert(key);
    auto it = cfg_.find(key);
    return it == cfg_.end() ? nullptr : &*it;
  }

  void str(const char* key, std::string& dst, bool required = false) {
    const json* v = get(key);
    if (!v) {
      if (required) diag(key, "required key missing");
      return;
    }
    if (!v->is_string()) {
      diag(key, "must be a string");
      return;
    }
    dst = v->get<std::string>();
    if (required && dst.empty()) diag(key, "must not be empty");
  }

  void input_path(const char* key, std::string& dst, bool required, bool dir = false) {
    const std::size_t before = out_.size();
    str(key, dst, required);
    if (out_.size() != before || dst.empty()) return;
    if (!fs::exists(dst)) {
      diag(key, std::string(dir ? "directory" : "file") + " does not exist: '" + dst + "'");
      return;
    }
    if (dir && !fs::is_directory(dst)) diag(key, "not a directory: '" + dst + "'");
  }

  void u64(const char* key, std::uint64_t& dst) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() &&
                                    v->get<std::int64_t>() < 0)) {
      diag(key, "must be a non-negative integer");
      return;
    }
    dst = v->get<std::uint64_t>();
  }

  void i64(const char* key, std::int64_t& dst, std::int64_t lo,
           std::int64_t hi = std::numeric_limits<std::int64_t>::max()) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_number_integer()) {
      diag(key, "must be an integer");
      return;
    }
    const std::int64_t x = v->get<std::int64_t>();
    if (x < lo || x > hi) {
      diag(key, "must be in [" + std::to_string(lo) + ", " +
                    (hi == std::numeric_limits<std::int64_t>::max() ? std::string("inf")
                                                                    : std::to_string(hi)) +
                    "], got " + std::to_string(x));
      return;
    }
    dst = x;
  }

  void intval(const char* key, int& dst, std::int64_t lo,
              std::int64_t hi = std::numeric_limits<int>::max()) {
    std::int64_t x = dst;
    i64(key, x, lo, hi);
    dst = static_cast<int>(x);
  }

  void num(const char* key, double& dst, double lo = -std::numeric_limits<double>::infinity(),
           bool exclusive = false, double hi = std::numeric_limits<double>::infinity()) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_number()) {
      diag(key, "must be a number");
      return;
    }
    const double x = v->get<double>();
    if (!std::isfinite(x) || x < lo || (exclusive && x == lo) || x > hi) {
      std::ostringstream msg;
      msg << "must be " << (exclusive ? "> " : ">= ") << lo;
      if (std::isfinite(hi)) msg << " and <= " << hi;
      msg << ", got " << x;
      diag(key, msg.str());
      return;
    }
    dst = x;
  }

  void pos_num(const char* key, double& dst) { num(key, dst, 0.0, true); }

  void boolean(const char* key, bool& dst) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_boolean()) {
      diag(key, "must be true or false");
      return;
    }
    dst = v->get<bool>();
  }

  void dims3(const char* key, Dims3& dst) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_array() || v->size() != 3 || !std::all_of(v->begin(), v->end(), [](const json& e) {
          return e.is_number_integer() && e.get<std::int64_t>() >= 2;
        })) {
      diag(key, "must be an array of 3 integers >= 2");
      return;
    }
    dst = Dims3{(*v)[0].get<std::int64_t>(), (*v)[1].get<std::int64_t>(),
                (*v)[2].get<std::int64_t>()};
  }

  void spacing3(const char* key, Spacing3& dst) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_array() || v->size() != 3 || !std::all_of(v->begin(), v->end(), [](const json& e) {
          return e.is_number() && e.get<double>() > 0;
        })) {
      diag(key, "must be an array of 3 numbers > 0");
      return;
    }
    dst = Spacing3{(*v)[0].get<double>(), (*v)[1].get<double>(), (*v)[2].get<double>()};
  }

  void str_list(const char* key, std::vector<std::string>& dst) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_array() ||
        !std::all_of(v->begin(), v->end(), [](const json& e) { return e.is_string(); })) {
      diag(key, "must be an array of strings");
      return;
    }
    dst.clear();
    for (const auto& e : *v) dst.push_back(e.get<std::string>());
  }

  void opt_u64(const char* key, std::optional<std::uint64_t>& dst) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      diag(key, "must be a non-negative integer");
      return;
    }
    dst = v->get<std::uint64_t>();
  }

  void opt_i64(const char* key, std::optional<std::int64_t>& dst, std::int64_t lo) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_number_integer() || v->get<std::int64_t>() < lo) {
      diag(key, "must be an integer >= " + std::to_string(lo));
      return;
    }
    dst = v->get<std::int64_t>();
  }

  void finish(const std::string& kind) {
    for (const auto& item : cfg_.items())
      if (!seen_.count(item.key()))
        diag(item.key(), "unknown key '" + item.key() + "' for kind '" + kind + "'");
  }

 private:
  const json& cfg_;
  std::vector<Diagnostic>& out_;
  std::set<std::string> seen_;
};

struct CommonParams {
  std::uint64_t seed = 0;
  std::string output_dir;
};

void parse_common(Schema& s, CommonParams& p) {
  s.u64("seed", p.seed);
  s.str("output_dir", p.output_dir, true);
}

// ---- per-kind parameter structs -------------------------------------------

struct PhantomGenParams : CommonParams {
  int n_subjects = 1;
  Dims3 dims{64, 96, 64};
  Spacing3 spacing{2.0 / 64.0, 6.0 / 96.0, 6.0 / 64.0};
  int n_layers = 8;
  double surface_amp_min = 1.0, surface_amp_max = 3.0;
  double surface_freq_min = 0.5, surface_freq_max = 1.5;
  double thickness_jitter = 0.25, thickness_scale = 1.0;
  int vessel_count = 2;
  double vessel_radius = 1.6, vessel_drift_amp = 6.0, vessel_shadow = 0.45;
  double noise_level = 0.15;
  bool fovea_pit = true;
  std::optional<std::uint64_t> template_seed;
  double deform_amp = 0.0;
};

PhantomGenParams parse_phantom_gen(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  PhantomGenParams p;
  parse_common(s, p);
  s.intval("n_subjects", p.n_subjects, 1, 9999);
  s.dims3("dims", p.dims);
  s.spacing3("spacing", p.spacing);
  s.intval("n_layers", p.n_layers, 1, 254);
  s.num("surface_amp_min", p.surface_amp_min, 0.0);
  s.num("surface_amp_max", p.surface_amp_max, 0.0);
  s.num("surface_freq_min", p.surface_freq_min, 0.0);
  s.num("surface_freq_max", p.surface_freq_max, 0.0);
  s.num("thickness_jitter", p.thickness_jitter, 0.0);
  s.pos_num("thickness_scale", p.thickness_scale);
  s.intval("vessel_count", p.vessel_count, 0);
  s.num("vessel_radius", p.vessel_radius, 0.0);
  s.num("vessel_drift_amp", p.vessel_drift_amp, 0.0);
  s.num("vessel_shadow", p.vessel_shadow, 0.0, false, 1.0);
  s.num("noise_level", p.noise_level, 0.0, false, 0.99);
  s.boolean("fovea_pit", p.fovea_pit);
  s.opt_u64("template_seed", p.template_seed);
  s.num("deform_amp", p.deform_amp, 0.0);
  if (p.surface_amp_max < p.surface_amp_min)
    s.diag("surface_amp_max", "must be >= surface_amp_min");
  if (p.surface_freq_max < p.surface_freq_min)
    s.diag("surface_freq_max", "must be >= surface_freq_min");
  s.finish("phantom-gen");
  return p;
}

struct InterpTrainParams : CommonParams {
  std::string dataset;
  std::vector<std::string> subjects;
  std::int64_t keep_slices = 0;
  std::int64_t latent_dim = 128, width = 128, depth = 6;
  double omega0 = 20.0, s0 = 10.0;
  bool use_enface = true;
  std::int64_t epochs = 1500;
  double lr0 = 1e-4, lr_decay = 0.99;
  std::int64_t early_stop_after = 100, patience = 20;
  double min_delta = 1e-5, alpha = 0.2, beta = 0.2;
};

InterpTrainParams parse_interp_train(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  InterpTrainParams p;
  parse_common(s, p);
  s.input_path("dataset", p.dataset, true, true);
  s.str_list("subjects", p.subjects);
  s.i64("keep_slices", p.keep_slices, 2);
  if (p.keep_slices == 0) s.diag("keep_slices", "required key missing");
  s.i64("latent_dim", p.latent_dim, 1);
  s.i64("width", p.width, 1);
  s.i64("depth", p.depth, 1);
  s.pos_num("omega0", p.omega0);
  s.pos_num("s0", p.s0);
  s.boolean("use_enface", p.use_enface);
  s.i64("epochs", p.epochs, 1);
  s.pos_num("lr0", p.lr0);
  s.num("lr_decay", p.lr_decay, 0.0, true, 1.0);
  s.i64("early_stop_after", p.early_stop_after, 0);
  s.i64("patience", p.patience, 1);
  s.num("min_delta", p.min_delta, 0.0);
  s.num("alpha", p.alpha, 0.0);
  s.num("beta", p.beta, 0.0);
  s.finish("interp-train");
  return p;
}

struct InterpInferParams : CommonParams {
  std::string model, dataset, subject;
  std::int64_t keep_slices = 0;
  std::int64_t epochs = 200;
  double lr0 = 1e-3, lr_decay = 0.99, beta = 0.2;
};

InterpInferParams parse_interp_infer(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  InterpInferParams p;
  parse_common(s, p);
  s.input_path("model", p.model, true);
  s.input_path("dataset", p.dataset, true, true);
  s.str("subject", p.subject, true);
  s.i64("keep_slices", p.keep_slices, 2);
  if (p.keep_slices == 0) s.diag("keep_slices", "required key missing");
  s.i64("epochs", p.epochs, 1);
  s.pos_num("lr0", p.lr0);
  s.num("lr_decay", p.lr_decay, 0.0, true, 1.0);
  s.num("beta", p.beta, 0.0);
  s.finish("interp-infer");
  return p;
}

struct InterpEvalParams : CommonParams {
  std::string model, priors, dataset, subject;
  std::optional<std::int64_t> out_nz;
  std::string experiment = "interp", resolution;
};

InterpEvalParams parse_interp_eval(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  InterpEvalParams p;
  parse_common(s, p);
  s.input_path("model", p.model, true);
  s.input_path("priors", p.priors, true);
  s.input_path("dataset", p.dataset, true, true);
  s.str("subject", p.subject, true);
  s.opt_i64("out_nz", p.out_nz, 2);
  s.str("experiment", p.experiment);
  s.str("resolution", p.resolution);
  s.finish("interp-eval");
  return p;
}

struct AtlasTrainParams : CommonParams {
  std::string dataset;
  std::vector<std::string> subjects;
  std::optional<std::int64_t> keep_slices;
  std::string atlas_type = "implicit";
  std::int64_t latent_dim = 128;
  std::int64_t atlas_width = 256, atlas_depth = 4;
  double atlas_omega0 = 30.0;
  std::int64_t disp_width = 128;
  double disp_omega0 = 30.0, max_disp = 0.2, weight_init = 0.001;
  std::int64_t pretrain_epochs = 500;
  double pretrain_lr = 5e-4;
  std::int64_t iters = 2000;
  double lr_displacement = 1e-5, lr_atlas = 1e-6, lr_latent = 1e-5, lr_mult = 0.999;
  std::int64_t coords_per_subject = 16384;
  double alpha = 1.0, beta = 0.01;
};

AtlasTrainParams parse_atlas_train_common(Schema& s) {
  AtlasTrainParams p;
  parse_common(s, p);
  s.input_path("dataset", p.dataset, true, true);
  s.str_list("subjects", p.subjects);
  s.opt_i64("keep_slices", p.keep_slices, 2);
  s.i64("latent_dim", p.latent_dim, 2);
  if (p.latent_dim % 2 != 0) s.diag("latent_dim", "must be even");
  s.i64("atlas_width", p.atlas_width, 1);
  s.i64("atlas_depth", p.atlas_depth, 1);
  s.pos_num("atlas_omega0", p.atlas_omega0);
  s.i64("disp_width", p.disp_width, 1);
  s.pos_num("disp_omega0", p.disp_omega0);
  s.pos_num("max_disp", p.max_disp);
  s.pos_num("weight_init", p.weight_init);
  s.i64("pretrain_epochs", p.pretrain_epochs, 0);
  s.pos_num("pretrain_lr", p.pretrain_lr);
  s.i64("iters", p.iters, 1);
  s.pos_num("lr_displacement", p.lr_displacement);
  s.pos_num("lr_atlas", p.lr_atlas);
  s.pos_num("lr_latent", p.lr_latent);
  s.num("lr_mult", p.lr_mult, 0.0, true, 1.0);
  s.i64("coords_per_subject", p.coords_per_subject, 8);
  s.num("alpha", p.alpha, 0.0);
  s.num("beta", p.beta, 0.0);
  return p;
}

AtlasTrainParams parse_atlas_train(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  AtlasTrainParams p = parse_atlas_train_common(s);
  s.str("atlas_type", p.atlas_type);
  if (p.atlas_type != "implicit" && p.atlas_type != "explicit")
    s.diag("atlas_type", "must be 'implicit' or 'explicit'");
  s.finish("atlas-train");
  return p;
}

AtlasTrainParams parse_ablation_explicit(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  AtlasTrainParams p = parse_atlas_train_common(s);
  if (!p.keep_slices) p.keep_slices = 16;
  s.finish("ablation-explicit");
  return p;
}

struct AtlasInferParams : CommonParams {
  std::string atlas_model, disp_model, dataset, subject;
  std::optional<std::int64_t> keep_slices;
  std::int64_t epochs = 100;
  double lr0 = 5e-4, lr_mult = 0.999;
  std::int64_t coords_per_subject = 16384;
  double gamma = 0.01;
};

AtlasInferParams parse_atlas_infer(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  AtlasInferParams p;
  parse_common(s, p);
  s.input_path("atlas_model", p.atlas_model, true);
  s.input_path("disp_model", p.disp_model, true);
  s.input_path("dataset", p.dataset, true, true);
  s.str("subject", p.subject, true);
  s.opt_i64("keep_slices", p.keep_slices, 2);
  s.i64("epochs", p.epochs, 1);
  s.pos_num("lr0", p.lr0);
  s.num("lr_mult", p.lr_mult, 0.0, true, 1.0);
  s.i64("coords_per_subject", p.coords_per_subject, 8);
  s.num("gamma", p.gamma, 0.0);
  s.finish("atlas-infer");
  return p;
}

struct MetricsParams : CommonParams {
  std::string volume_a, volume_b, labels_a, labels_b;
  std::string subject, experiment = "metrics", resolution;
};

MetricsParams parse_metrics(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  MetricsParams p;
  parse_common(s, p);
  s.input_path("volume_a", p.volume_a, true);
  s.input_path("volume_b", p.volume_b, true);
  s.input_path("labels_a", p.labels_a, false);
  s.input_path("labels_b", p.labels_b, false);
  if (p.labels_a.empty() != p.labels_b.empty())
    s.diag(p.labels_a.empty() ? "labels_a" : "labels_b",
           "labels_a and labels_b must be given together");
  s.str("subject", p.subject);
  s.str("experiment", p.experiment);
  s.str("resolution", p.resolution);
  s.finish("metrics");
  return p;
}

struct LatentPcaParams : CommonParams {
  std::string priors, disp_model, mask_labels;
  std::int64_t k = 2;
  Dims3 grid{16, 16, 16};
};

LatentPcaParams parse_latent_pca(const json& cfg, std::vector<Diagnostic>& out) {
  Schema s(cfg, out);
  LatentPcaParams p;
  parse_common(s, p);
  s.input_path("priors", p.priors, true);
  s.input_path("disp_model", p.disp_model, false);
  s.input_path("mask_labels", p.mask_labels, false);
  s.i64("k", p.k, 1);
  s.dims3("grid", p.grid);
  if (p.grid.ny < 3 || p.grid.nx < 3 || p.grid.nz < 3)
    s.diag("grid", "each extent must be >= 3 for Jacobian differences");
  if (!p.mask_labels.empty() && p.disp_model.empty())
    s.diag("mask_labels", "requires disp_model");
  s.finish("latent-pca");
  return p;
}

// ---- run context -----------------------------------------------------------

struct RunCtx {
  fs::path out;
  std::ostream* progress = nullptr;
  json summary = json::object();
  std::map<std::string, std::string> artifacts;
  std::vector<std::string> timing;

  void add_artifact(const std::string& rel) { artifacts[rel] = sha256_file(out / rel); }
  void add_timing(const std::string& rel) { timing.push_back(rel); }
  void log(const std::string& line) const {
    if (progress) (*progress) << line << "\n";
  }
};

std::function<void(const EpochLoss&)> epoch_printer(const RunCtx& ctx, std::string tag,
                                                    std::int64_t total) {
  if (!ctx.progress) return {};
  const std::int64_t step = std::max<std::int64_t>(1, total / 10);
  std::ostream* os = ctx.progress;
  return [os, tag, step, total](const EpochLoss& e) {
    if (e.epoch % step == 0 || e.epoch + 1 == total)
      (*os) << tag << " epoch " << e.epoch << "/" << total << " loss " << e.total << "\n";
  };
}

std::function<void(const RegIterLoss&)> iter_printer(const RunCtx& ctx, std::string tag,
                                                     std::int64_t total) {
  if (!ctx.progress) return {};
  const std::int64_t step = std::max<std::int64_t>(1, total / 10);
  std::ostream* os = ctx.progress;
  return [os, tag, step, total](const RegIterLoss& e) {
    if (e.iter % step == 0 || e.iter + 1 == total)
      (*os) << tag << " iter " << e.iter << "/" << total << " loss " << e.total << "\n";
  };
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

void write_report_files(RunCtx& ctx, const std::string& stem, const MetricReport& report) {
  {
    std::ofstream os(ctx.out / (stem + ".csv"));
    if (!os) throw std::runtime_error("cannot write report '" + stem + ".csv'");
    report.write_csv(os);
  }
  ctx.add_artifact(stem + ".csv");
  write_json_file(ctx.out / (stem + ".json"), report.to_json());
  ctx.add_artifact(stem + ".json");
}

// ---- registration evaluation ----------------------------------------------

struct RegRow {
  std::string variant, subject;
  double assd = 0, dice = 0, ssim = 0, neg_j = 0, mean_u = 0, seconds = 0;
};

template <typename AtlasModel>
RegRow eval_registration(const AtlasModel& atlas, const DeformationField<float>& field,
                         const RegSubject& subj, const std::string& variant) {
  const auto t0 = Clock::now();
  RegRow r;
  r.variant = variant;
  r.subject = subj.name;
  auto [warped_vol, warped_lab] =
      warp_atlas(atlas, field, subj.volume.dims(), subj.volume.spacing());
  const auto classes = foreground_classes(subj.labels.num_classes());
  r.dice = dice_volume_3d(warped_lab, subj.labels, classes).mean;
  auto [assd_row, hd_row] = surface_distance_volume(warped_lab, subj.labels, classes);
  r.assd = assd_row.mean;
  r.ssim = ssim_volume(warped_vol, subj.volume).mean;
  std::vector<std::uint8_t> mask(subj.labels.labels().size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = subj.labels.labels()[i] > 0;
  const JacobianStats js = jacobian_stats(field.field_fn(), subj.volume.dims(), &mask);
  r.neg_j = js.neg_fraction_percent;
  r.mean_u = js.mean_l1;
  r.seconds = seconds_since(t0);
  return r;
}

void write_reg_report(RunCtx& ctx, const std::string& prefix, const std::vector<RegRow>& rows) {
  const std::string full = prefix + "registration.csv";
  const std::string det = prefix + "registration_metrics.csv";
  {
    std::ofstream os(ctx.out / full);
    if (!os) throw std::runtime_error("cannot write '" + full + "'");
    os.precision(10);
    os << "variant,subject,assd,dice,ssim,neg_jacobian_percent,mean_abs_u,seconds\n";
    for (const auto& r : rows)
      os << r.variant << "," << r.subject << "," << r.assd << "," << r.dice << "," << r.ssim
         << "," << r.neg_j << "," << r.mean_u << "," << r.seconds << "\n";
  }
  ctx.add_timing(full);
  {
    std::ofstream os(ctx.out / det);
    if (!os) throw std::runtime_error("cannot write '" + det + "'");
    os.precision(10);
    os << "variant,subject,assd,dice,ssim,neg_jacobian_percent,mean_abs_u\n";
    for (const auto& r : rows)
      os << r.variant << "," << r.subject << "," << r.assd << "," << r.dice << "," << r.ssim
         << "," << r.neg_j << "," << r.mean_u << "\n";
  }
  ctx.add_artifact(det);
}

double mean_over(const std::vector<RegRow>& rows, const std::string& variant,
                 double RegRow::*member) {
  double sum = 0;
  int n = 0;
  for (const auto& r : rows)
    if (r.variant == variant) {
      sum += r.*member;
      ++n;
    }
  return n ? sum / n : 0.0;
}

// ---- phantom-gen -----------------------------------------------------------

void run_phantom_gen(const PhantomGenParams& p, RunCtx& ctx) {
  json subjects = json::array();
  for (int i = 0; i < p.n_subjects; ++i) {
    PhantomSpec spec;
    spec.dims = p.dims;
    spec.spacing = p.spacing;
    spec.n_layers = p.n_layers;
    spec.surface_amp_min = p.surface_amp_min;
    spec.surface_amp_max = p.surface_amp_max;
    spec.surface_freq_min = p.surface_freq_min;
    spec.surface_freq_max = p.surface_freq_max;
    spec.thickness_jitter = p.thickness_jitter;
    spec.thickness_scale = p.thickness_scale;
    spec.vessel_count = p.vessel_count;
    spec.vessel_radius = p.vessel_radius;
    spec.vessel_drift_amp = p.vessel_drift_amp;
    spec.vessel_shadow = p.vessel_shadow;
    spec.noise_level = p.noise_level;
    spec.fovea_pit = p.fovea_pit;
    spec.template_seed = p.template_seed;
    spec.deform_amp = p.deform_amp;
    spec.seed = p.seed + static_cast<std::uint64_t>(i);

    char buf[16];
    std::snprintf(buf, sizeof buf, "s%03d", i);
    const std::string name = buf;
    ctx.log("phantom-gen subject " + name);
    const Phantom ph = phantom_generate(spec);

    write_volume(ctx.out / (name + ".volume"), ph.volume);
    ctx.add_artifact(name + ".volume");
    write_labels(ctx.out / (name + ".labels"), ph.labels);
    ctx.add_artifact(name + ".labels");
    write_enface(ctx.out / (name + ".enface"), ph.enface);
    ctx.add_artifact(name + ".enface");

    const std::string vessels = name + ".vessels.csv";
    {
      std::ofstream os(ctx.out / vessels);
      if (!os) throw std::runtime_error("cannot write '" + vessels + "'");
      os.precision(10);
      os << "vessel,z,x_voxel\n";
      for (std::size_t v = 0; v < ph.vessel_paths.size(); ++v)
        for (std::size_t z = 0; z < ph.vessel_paths[v].size(); ++z)
          os << v << "," << z << "," << ph.vessel_paths[v][z] << "\n";
    }
    ctx.add_artifact(vessels);

    subjects.push_back({{"name", name},
                        {"volume", name + ".volume"},
                        {"labels", name + ".labels"},
                        {"enface", name + ".enface"},
                        {"vessels", vessels},
                        {"seed", spec.seed}});
  }

  json cohort;
  cohort["magic"] = "NFACOHORT1";
  cohort["n_layers"] = p.n_layers;
  cohort["dims"] = {p.dims.ny, p.dims.nx, p.dims.nz};
  cohort["spacing"] = {p.spacing.sy, p.spacing.sx, p.spacing.sz};
  cohort["subjects"] = subjects;
  write_json_file(ctx.out / "cohort.json", cohort);
  ctx.add_artifact("cohort.json");
  ctx.summary["n_subjects"] = p.n_subjects;
}

// ---- interp pipelines ------------------------------------------------------

void run_interp_train(const InterpTrainParams& p, RunCtx& ctx) {
  const Cohort cohort = load_cohort(p.dataset, p.subjects);
  if (cohort.subjects.empty()) throw std::runtime_error("interp-train: cohort is empty");
  const Dims3 d = cohort.subjects.front().volume.dims();
  const auto kept = slice_schedule(d.nz, p.keep_slices, SliceMode::Equidistant);

  InterpNetConfig<float> ncfg;
  ncfg.L = p.latent_dim;
  ncfg.C = cohort.num_classes;
  ncfg.width = p.width;
  ncfg.depth = p.depth;
  ncfg.omega0 = static_cast<float>(p.omega0);
  ncfg.s0 = static_cast<float>(p.s0);
  ncfg.use_enface = p.use_enface;

  Rng rng(p.seed);
  InterpNet<float> net(ncfg, rng);
  std::vector<Tensor<float>> priors;
  std::vector<InterpSubject<float>> subjects;
  std::vector<std::string> names;
  for (const auto& s : cohort.subjects) {
    priors.push_back(init_latent_interp<float>(p.latent_dim, rng));
    subjects.push_back(
        make_interp_subject<float>(s.name, s.volume, s.labels, s.enface, cohort.num_classes, kept));
    names.push_back(s.name);
  }

  InterpTrainConfig tcfg;
  tcfg.epochs = static_cast<int>(p.epochs);
  tcfg.lr0 = p.lr0;
  tcfg.lr_decay = p.lr_decay;
  tcfg.early_stop_after = static_cast<int>(p.early_stop_after);
  tcfg.patience = static_cast<int>(p.patience);
  tcfg.min_delta = p.min_delta;
  tcfg.alpha = p.alpha;
  tcfg.beta = p.beta;
  tcfg.seed = p.seed;

  const InterpTrainResult res =
      interp_train(net, priors, subjects, tcfg, epoch_printer(ctx, "interp-train", p.epochs));

  write_loss_history_csv((ctx.out / "history.csv").string(), res.history);
  ctx.add_artifact("history.csv");
  save_checkpoint((ctx.out / "model.ckpt").string(), make_checkpoint(net, p.seed));
  ctx.add_artifact("model.ckpt");
  save_checkpoint((ctx.out / "priors.ckpt").string(),
                  make_latent_checkpoint(names, to_f32(priors), p.seed));
  ctx.add_artifact("priors.ckpt");

  ctx.summary["last_epoch"] = res.last_epoch;
  ctx.summary["early_stopped"] = res.early_stopped;
  if (!res.history.empty()) ctx.summary["final_loss"] = res.history.back().total;
}

void run_interp_infer(const InterpInferParams& p, RunCtx& ctx) {
  const Checkpoint ckpt = load_checkpoint(p.model);
  const InterpNet<float> net = interp_net_from_checkpoint(ckpt);
  const Cohort cohort = load_cohort(p.dataset, {p.subject});
  const CohortSubject& s = cohort.subjects.front();
  if (cohort.num_classes != static_cast<int>(net.config().C))
    throw std::runtime_error("interp-infer: model expects " + std::to_string(net.config().C) +
                             " classes but dataset has " + std::to_string(cohort.num_classes));
  const auto kept = slice_schedule(s.volume.dims().nz, p.keep_slices, SliceMode::Equidistant);
  const auto subj =
      make_interp_subject<float>(s.name, s.volume, s.labels, s.enface, cohort.num_classes, kept);

  InterpInferConfig icfg;
  icfg.epochs = static_cast<int>(p.epochs);
  icfg.lr0 = p.lr0;
  icfg.lr_decay = p.lr_decay;
  icfg.beta = p.beta;
  icfg.seed = p.seed;

  const InterpInferResult<float> res =
      interp_infer_latent(net, subj, icfg, epoch_printer(ctx, "interp-infer", p.epochs));

  write_loss_history_csv((ctx.out / "history.csv").string(), res.history);
  ctx.add_artifact("history.csv");
  save_checkpoint((ctx.out / "prior.ckpt").string(),
                  make_latent_checkpoint({s.name}, {res.prior}, p.seed));
  ctx.add_artifact("prior.ckpt");

  ctx.summary["params_sha_before"] = res.params_sha_before;
  ctx.summary["params_sha_after"] = res.params_sha_after;
  ctx.summary["network_unchanged"] = res.params_sha_before == res.params_sha_after;
  if (!res.history.empty()) ctx.summary["final_loss"] = res.history.back().total;
}

void run_interp_eval(const InterpEvalParams& p, RunCtx& ctx) {
  const InterpNet<float> net = interp_net_from_checkpoint(load_checkpoint(p.model));
  const Checkpoint priors = load_checkpoint(p.priors);
  if (priors.architecture != "latent-priors")
    throw std::runtime_error("interp-eval: '" + p.priors + "' is not a latent-priors checkpoint");
  const auto it = std::find(priors.names.begin(), priors.names.end(), p.subject);
  if (it == priors.names.end())
    throw std::runtime_error("interp-eval: no prior for subject '" + p.subject + "'");
  const Tensor<float> prior = priors.params[static_cast<std::size_t>(it - priors.names.begin())];

  const Cohort cohort = load_cohort(p.dataset, {p.subject});
  const CohortSubject& s = cohort.subjects.front();
  const Dims3 native = s.volume.dims();
  Dims3 out_dims = native;
  Spacing3 out_spacing = s.volume.spacing();
  if (p.out_nz) {
    out_dims.nz = *p.out_nz;
    out_spacing.sz = s.volume.spacing().sz * static_cast<double>(native.nz - 1) /
                     static_cast<double>(out_dims.nz - 1);
  }

  ctx.log("interp-eval evaluating " + std::to_string(out_dims.nz) + " slices");
  auto [vol, lab] = interp_evaluate(net, prior, s.enface, out_dims, out_spacing);
  write_volume(ctx.out / "recon.volume", vol);
  ctx.add_artifact("recon.volume");
  write_labels(ctx.out / "recon.labels", lab);
  ctx.add_artifact("recon.labels");

  if (out_dims == native) {
    MetricReport report;
    report.subject = p.subject;
    report.experiment = p.experiment;
    report.resolution =
        p.resolution.empty() ? std::to_string(native.nz) + " slices" : p.resolution;
    report.rows.push_back(mae_volume(vol, s.volume));
    report.rows.push_back(psnr_volume(vol, s.volume));
    report.rows.push_back(ssim_volume(vol, s.volume));
    const auto classes = foreground_classes(cohort.num_classes);
    report.rows.push_back(dice_volume(lab, s.labels, classes));
    auto [assd_row, hd_row] = surface_distance_volume(lab, s.labels, classes);
    report.rows.push_back(assd_row);
    report.rows.push_back(hd_row);
    write_report_files(ctx, "report", report);
    for (const auto& row : report.rows) ctx.summary[row.metric] = row.mean;
  }
}

// ---- atlas pipelines -------------------------------------------------------

std::vector<RegSubject> to_reg_subjects(const Cohort& cohort,
                                        const std::optional<std::int64_t>& keep) {
  std::vector<RegSubject> out;
  for (const auto& s : cohort.subjects) {
    RegSubject r;
    r.name = s.name;
    r.volume = keep ? subsample_z(s.volume, *keep) : s.volume;
    r.labels = keep ? subsample_z(s.labels, *keep) : s.labels;
    out.push_back(std::move(r));
  }
  return out;
}

struct AtlasCoreOutcome {
  double dice_init = 0, dice_trained = 0;
  double train_seconds = 0;
  std::vector<RegRow> rows;
};

template <typename AtlasModel>
AtlasCoreOutcome atlas_train_core(AtlasModel& atlas, const AtlasTrainParams& p,
                                  const std::vector<RegSubject>& dataset,
                                  const std::vector<RegSubject>& eval_dataset, RunCtx& ctx,
                                  const std::string& prefix, bool do_pretrain) {
  Rng disp_rng = Rng(p.seed).fork(2);
  Rng prior_rng = Rng(p.seed).fork(3);

  DisplacementNetConfig<float> dcfg;
  dcfg.L = p.latent_dim;
  dcfg.width = p.disp_width;
  dcfg.omega0 = static_cast<float>(p.disp_omega0);
  dcfg.max_disp = static_cast<float>(p.max_disp);
  dcfg.weight_init = static_cast<float>(p.weight_init);
  DisplacementNet<float> disp(dcfg, disp_rng);

  std::vector<Tensor<float>> priors;
  std::vector<std::string> names;
  for (const auto& s : dataset) {
    priors.push_back(init_latent_reg<float>(p.latent_dim, prior_rng));
    names.push_back(s.name);
  }

  RegTrainConfig tcfg;
  tcfg.iters = static_cast<int>(p.iters);
  tcfg.lr_displacement = p.lr_displacement;
  tcfg.lr_atlas = p.lr_atlas;
  tcfg.lr_latent = p.lr_latent;
  tcfg.lr_mult = p.lr_mult;
  tcfg.coords_per_subject = p.coords_per_subject;
  tcfg.pretrain_epochs = static_cast<int>(p.pretrain_epochs);
  tcfg.pretrain_lr = p.pretrain_lr;
  tcfg.seed = p.seed;
  RegLossWeights w;
  w.alpha = p.alpha;
  w.beta = p.beta;

  AtlasCoreOutcome out;
  const auto t0 = Clock::now();
  if (do_pretrain && p.pretrain_epochs > 0) {
    const auto hist = atlas_pretrain(atlas, dataset, tcfg, w,
                                     epoch_printer(ctx, prefix + "pretrain", p.pretrain_epochs));
    write_loss_history_csv((ctx.out / (prefix + "pretrain.csv")).string(), hist);
    ctx.add_artifact(prefix + "pretrain.csv");
  }
  const RegTrainResult res =
      joint_train(atlas, disp, priors, dataset, tcfg, w, iter_printer(ctx, prefix + "joint", p.iters));
  out.train_seconds = seconds_since(t0);

  write_reg_history_csv((ctx.out / (prefix + "history.csv")).string(), res.history);
  ctx.add_artifact(prefix + "history.csv");
  save_checkpoint((ctx.out / (prefix + "atlas.ckpt")).string(), make_checkpoint(atlas, p.seed));
  ctx.add_artifact(prefix + "atlas.ckpt");
  save_checkpoint((ctx.out / (prefix + "disp.ckpt")).string(), make_checkpoint(disp, p.seed));
  ctx.add_artifact(prefix + "disp.ckpt");
  save_checkpoint((ctx.out / (prefix + "priors.ckpt")).string(),
                  make_latent_checkpoint(names, to_f32(priors), p.seed));
  ctx.add_artifact(prefix + "priors.ckpt");

  const Dims3 ad = dataset.front().volume.dims();
  auto [avol, alab] = atlas_evaluate(atlas, ad, dataset.front().volume.spacing());
  write_volume(ctx.out / (prefix + "atlas.volume"), avol);
  ctx.add_artifact(prefix + "atlas.volume");
  write_labels(ctx.out / (prefix + "atlas.labels"), alab);
  ctx.add_artifact(prefix + "atlas.labels");

  ctx.log(prefix + "evaluating registration report");
  for (std::size_t i = 0; i < eval_dataset.size(); ++i) {
    out.rows.push_back(
        eval_registration(atlas, DeformationField<float>{}, eval_dataset[i], "init"));
    out.rows.push_back(eval_registration(atlas, DeformationField<float>(disp, priors[i]),
                                         eval_dataset[i], "trained"));
  }
  write_reg_report(ctx, prefix, out.rows);
  out.dice_init = mean_over(out.rows, "init", &RegRow::dice);
  out.dice_trained = mean_over(out.rows, "trained", &RegRow::dice);
  return out;
}

void run_atlas_train(const AtlasTrainParams& p, RunCtx& ctx) {
  const Cohort cohort = load_cohort(p.dataset, p.subjects);
  if (cohort.subjects.empty()) throw std::runtime_error("atlas-train: cohort is empty");
  const auto dataset = to_reg_subjects(cohort, p.keep_slices);

  AtlasCoreOutcome out;
  if (p.atlas_type == "implicit") {
    AtlasNetConfig<float> acfg;
    acfg.C = cohort.num_classes;
    acfg.in_dim = 3;
    acfg.width = p.atlas_width;
    acfg.depth = p.atlas_depth;
    acfg.omega0 = static_cast<float>(p.atlas_omega0);
    Rng atlas_rng = Rng(p.seed).fork(1);
    AtlasNet<float> atlas(acfg, atlas_rng);
    out = atlas_train_core(atlas, p, dataset, dataset, ctx, "", true);
  } else {
    ExplicitAtlas<float> atlas(median_volume(dataset), modal_labels(dataset));
    out = atlas_train_core(atlas, p, dataset, dataset, ctx, "", false);
  }
  ctx.summary["atlas_type"] = p.atlas_type;
  ctx.summary["dice_init"] = out.dice_init;
  ctx.summary["dice_trained"] = out.dice_trained;
  ctx.summary["train_seconds"] = out.train_seconds;
}

template <typename AtlasModel>
void atlas_infer_with(const AtlasModel& atlas, const DisplacementNet<float>& disp,
                      const AtlasInferParams& p, const CohortSubject& s, RunCtx& ctx) {
  const Volume infer_vol = p.keep_slices ? subsample_z(s.volume, *p.keep_slices) : s.volume;

  RegInferConfig icfg;
  icfg.epochs = static_cast<int>(p.epochs);
  icfg.lr0 = p.lr0;
  icfg.lr_mult = p.lr_mult;
  icfg.coords_per_subject = p.coords_per_subject;
  icfg.seed = p.seed;
  RegLossWeights w;
  w.gamma = p.gamma;

  const RegInferResult<float> res =
      reg_infer_latent(atlas, disp, infer_vol, icfg, w, epoch_printer(ctx, "atlas-infer", p.epochs));

  write_loss_history_csv((ctx.out / "history.csv").string(), res.history);
  ctx.add_artifact("history.csv");
  save_checkpoint((ctx.out / "prior.ckpt").string(),
                  make_latent_checkpoint({s.name}, {res.prior}, p.seed));
  ctx.add_artifact("prior.ckpt");

  RegSubject full;
  full.name = s.name;
  full.volume = s.volume;
  full.labels = s.labels;
  std::vector<RegRow> rows;
  rows.push_back(eval_registration(atlas, DeformationField<float>{}, full, "init"));
  rows.push_back(eval_registration(atlas, DeformationField<float>(disp, res.prior), full, "trained"));
  write_reg_report(ctx, "", rows);

  ctx.summary["atlas_sha_before"] = res.atlas_sha_before;
  ctx.summary["atlas_sha_after"] = res.atlas_sha_after;
  ctx.summary["disp_sha_before"] = res.disp_sha_before;
  ctx.summary["disp_sha_after"] = res.disp_sha_after;
  ctx.summary["networks_unchanged"] =
      res.atlas_sha_before == res.atlas_sha_after && res.disp_sha_before == res.disp_sha_after;
  ctx.summary["dice_init"] = rows[0].dice;
  ctx.summary["dice_trained"] = rows[1].dice;
  ctx.summary["inference_slices"] = infer_vol.dims().nz;
  if (!res.history.empty()) ctx.summary["final_loss"] = res.history.back().total;
}

void run_atlas_infer(const AtlasInferParams& p, RunCtx& ctx) {
  const Checkpoint ackpt = load_checkpoint(p.atlas_model);
  const DisplacementNet<float> disp = displacement_net_from_checkpoint(load_checkpoint(p.disp_model));
  const Cohort cohort = load_cohort(p.dataset, {p.subject});
  const CohortSubject& s = cohort.subjects.front();

  if (ackpt.architecture == "atlas-net") {
    const AtlasNet<float> atlas = atlas_net_from_checkpoint(ackpt);
    atlas_infer_with(atlas, disp, p, s, ctx);
  } else if (ackpt.architecture == "atlas-explicit") {
    const ExplicitAtlas<float> atlas = explicit_atlas_from_checkpoint(ackpt);
    atlas_infer_with(atlas, disp, p, s, ctx);
  } else {
    throw std::runtime_error("atlas-infer: unsupported atlas architecture '" + ackpt.architecture +
                             "'");
  }
}

// ---- metrics ---------------------------------------------------------------

void run_metrics(const MetricsParams& p, RunCtx& ctx) {
  const Volume a = read_volume(p.volume_a);
  const Volume b = read_volume(p.volume_b);
  if (!(a.dims() == b.dims()))
    throw std::runtime_error("metrics: volume dims differ between '" + p.volume_a + "' and '" +
                             p.volume_b + "'");
  MetricReport report;
  report.subject = p.subject;
  report.experiment = p.experiment;
  report.resolution = p.resolution;
  report.rows.push_back(mae_volume(a, b));
  report.rows.push_back(psnr_volume(a, b));
  report.rows.push_back(ssim_volume(a, b));
  if (!p.labels_a.empty()) {
    const LabelVolume la = read_labels(p.labels_a);
    const LabelVolume lb = read_labels(p.labels_b);
    if (!(la.dims() == a.dims()) || !(lb.dims() == a.dims()))
      throw std::runtime_error("metrics: label dims do not match the volumes");
    const auto classes = foreground_classes(std::max(la.num_classes(), lb.num_classes()));
    report.rows.push_back(dice_volume(la, lb, classes));
    auto [assd_row, hd_row] = surface_distance_volume(la, lb, classes);
    report.rows.push_back(assd_row);
    report.rows.push_back(hd_row);
  }
  write_report_files(ctx, "report", report);
  for (const auto& row : report.rows) ctx.summary[row.metric] = row.mean;
}

// ---- latent-pca ------------------------------------------------------------

void run_latent_pca(const LatentPcaParams& p, RunCtx& ctx) {
  const Checkpoint priors = load_checkpoint(p.priors);
  if (priors.architecture != "latent-priors")
    throw std::runtime_error("latent-pca: '" + p.priors + "' is not a latent-priors checkpoint");
  std::vector<std::vector<double>> rows;
  for (const auto& t : priors.params) rows.push_back(latent_row(t));

  if (p.disp_model.empty()) {
    const PcaResult pr = pca(rows, p.k);
    write_variance_csv((ctx.out / "variance.csv").string(), pr);
    ctx.add_artifact("variance.csv");
    json a;
    a["explained_variance_ratio"] = pr.explained_variance_ratio;
    a["zero_variance"] = pr.zero_variance;
    a["projections"] = pr.projections;
    a["subjects"] = priors.names;
    write_json_file(ctx.out / "analysis.json", a);
    ctx.add_artifact("analysis.json");
    if (!pr.explained_variance_ratio.empty())
      ctx.summary["pc1_ratio"] = pr.explained_variance_ratio[0];
    ctx.summary["zero_variance"] = pr.zero_variance;
    return;
  }

  const DisplacementNet<float> disp =
      displacement_net_from_checkpoint(load_checkpoint(p.disp_model));
  std::vector<DispFieldFn> fields;
  for (const auto& t : priors.params)
    fields.push_back(DeformationField<float>(disp, t).field_fn());

  std::vector<std::uint8_t> mask;
  const std::vector<std::uint8_t>* mask_ptr = nullptr;
  if (!p.mask_labels.empty()) {
    const LabelVolume ml = read_labels(p.mask_labels);
    if (!(ml.dims() == p.grid))
      throw std::runtime_error("latent-pca: mask_labels dims must match the grid");
    mask.resize(ml.labels().size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = ml.labels()[i] > 0;
    mask_ptr = &mask;
  }

  ctx.log("latent-pca evaluating " + std::to_string(fields.size()) + " Jacobian fields");
  const LatentCorrelation c = latent_jacobian_correlation(rows, fields, p.grid, mask_ptr, p.k);
  write_variance_csv((ctx.out / "variance.csv").string(), c.pca);
  ctx.add_artifact("variance.csv");
  write_scatter_csv((ctx.out / "scatter.csv").string(), c, priors.names);
  ctx.add_artifact("scatter.csv");

  json a;
  a["explained_variance_ratio"] = c.pca.explained_variance_ratio;
  a["zero_variance"] = c.pca.zero_variance;
  a["subjects"] = priors.names;
  a["mean_jacobian"] = c.response;
  json per = json::array();
  for (const auto& pc : c.per_component)
    per.push_back({{"pearson_r", pc.r}, {"zero_variance", pc.zero_variance}});
  a["per_component"] = per;
  write_json_file(ctx.out / "analysis.json", a);
  ctx.add_artifact("analysis.json");

  double best = 0;
  for (const auto& pc : c.per_component) best = std::max(best, std::abs(pc.r));
  ctx.summary["max_abs_r"] = best;
  if (!c.per_component.empty()) ctx.summary["pc1_r"] = c.per_component[0].r;
}

// ---- ablation --------------------------------------------------------------

void run_ablation_explicit(const AtlasTrainParams& p, RunCtx& ctx) {
  const Cohort cohort = load_cohort(p.dataset, p.subjects);
  if (cohort.subjects.empty()) throw std::runtime_error("ablation-explicit: cohort is empty");
  const auto dataset = to_reg_subjects(cohort, p.keep_slices);

  fs::create_directories(ctx.out / "implicit");
  fs::create_directories(ctx.out / "explicit");

  AtlasNetConfig<float> acfg;
  acfg.C = cohort.num_classes;
  acfg.in_dim = 3;
  acfg.width = p.atlas_width;
  acfg.depth = p.atlas_depth;
  acfg.omega0 = static_cast<float>(p.atlas_omega0);
  Rng atlas_rng = Rng(p.seed).fork(1);
  AtlasNet<float> implicit_atlas(acfg, atlas_rng);
  ctx.log("ablation-explicit: training implicit variant");
  const AtlasCoreOutcome implicit_out =
      atlas_train_core(implicit_atlas, p, dataset, dataset, ctx, "implicit/", true);

  ExplicitAtlas<float> explicit_atlas(median_volume(dataset), modal_labels(dataset));
  ctx.log("ablation-explicit: training explicit variant");
  const AtlasCoreOutcome explicit_out =
      atlas_train_core(explicit_atlas, p, dataset, dataset, ctx, "explicit/", false);

  const auto summarize = [](const AtlasCoreOutcome& o, const char* variant, double seconds) {
    RegRow mean;
    mean.variant = variant;
    mean.subject = "mean";
    mean.assd = mean_over(o.rows, "trained", &RegRow::assd);
    mean.dice = mean_over(o.rows, "trained", &RegRow::dice);
    mean.ssim = mean_over(o.rows, "trained", &RegRow::ssim);
    mean.neg_j = mean_over(o.rows, "trained", &RegRow::neg_j);
    mean.mean_u = mean_over(o.rows, "trained", &RegRow::mean_u);
    mean.seconds = seconds;
    return mean;
  };
  const RegRow ri = summarize(implicit_out, "implicit", implicit_out.train_seconds);
  const RegRow re = summarize(explicit_out, "explicit", explicit_out.train_seconds);

  {
    std::ofstream os(ctx.out / "comparison.csv");
    if (!os) throw std::runtime_error("cannot write 'comparison.csv'");
    os.precision(10);
    os << "variant,dice,assd,ssim,neg_jacobian_percent,mean_abs_u,seconds\n";
    for (const RegRow* r : {&ri, &re})
      os << r->variant << "," << r->dice << "," << r->assd << "," << r->ssim << "," << r->neg_j
         << "," << r->mean_u << "," << r->seconds << "\n";
  }
  ctx.add_timing("comparison.csv");
  {
    std::ofstream os(ctx.out / "comparison_metrics.csv");
    if (!os) throw std::runtime_error("cannot write 'comparison_metrics.csv'");
    os.precision(10);
    os << "variant,dice,assd,ssim,neg_jacobian_percent,mean_abs_u\n";
    for (const RegRow* r : {&ri, &re})
      os << r->variant << "," << r->dice << "," << r->assd << "," << r->ssim << "," << r->neg_j
         << "," << r->mean_u << "\n";
  }
  ctx.add_artifact("comparison_metrics.csv");

  ctx.summary["dice_implicit"] = ri.dice;
  ctx.summary["dice_explicit"] = re.dice;
  ctx.summary["dice_init_implicit"] = implicit_out.dice_init;
  ctx.summary["dice_init_explicit"] = explicit_out.dice_init;
}

}  // namespace

// ---- public API ------------------------------------------------------------

ConfigError::ConfigError(std::vector<Diagnostic> diags)
    : std::invalid_argument(diags.empty() ? "invalid config"
                                          : diags.front().field + ": " + diags.front().message),
      diags_(std::move(diags)) {}

nlohmann::json load_experiment_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError({{path.string(), "cannot read config file"}});
  json cfg = json::parse(is, nullptr, false);
  if (cfg.is_discarded()) throw ConfigError({{path.string(), "not valid JSON"}});
  return cfg;
}

std::vector<Diagnostic> validate_experiment(const json& cfg) {
  std::vector<Diagnostic> out;
  if (!cfg.is_object()) {
    out.push_back({"", "config must be a JSON object"});
    return out;
  }
  const auto it = cfg.find("kind");
  if (it == cfg.end() || !it->is_string()) {
    out.push_back({"kind", "required key missing or not a string"});
    return out;
  }
  const std::string kind = it->get<std::string>();
  if (!known_kinds().count(kind)) {
    std::string all;
    for (const auto& k : known_kinds()) all += (all.empty() ? "" : " | ") + k;
    out.push_back({"kind", "unknown kind '" + kind + "'; expected one of " + all});
    return out;
  }
  if (kind == "phantom-gen")
    parse_phantom_gen(cfg, out);
  else if (kind == "interp-train")
    parse_interp_train(cfg, out);
  else if (kind == "interp-infer")
    parse_interp_infer(cfg, out);
  else if (kind == "interp-eval")
    parse_interp_eval(cfg, out);
  else if (kind == "atlas-train")
    parse_atlas_train(cfg, out);
  else if (kind == "atlas-infer")
    parse_atlas_infer(cfg, out);
  else if (kind == "metrics")
    parse_metrics(cfg, out);
  else if (kind == "latent-pca")
    parse_latent_pca(cfg, out);
  else if (kind == "ablation-explicit")
    parse_ablation_explicit(cfg, out);
  return out;
}

std::string config_sha256(const json& cfg) {
  json c = cfg;
  c.erase("output_dir");
  return sha256_hex(c.dump());
}

RunResult run_experiment(json cfg, const RunOptions& opt) {
  if (!opt.output_dir.empty()) cfg["output_dir"] = opt.output_dir;
  if (opt.seed) cfg["seed"] = *opt.seed;
  {
    auto diags = validate_experiment(cfg);
    if (!diags.empty()) throw ConfigError(std::move(diags));
  }
  const std::string kind = cfg["kind"].get<std::string>();

  RunCtx ctx;
  ctx.out = fs::path(cfg["output_dir"].get<std::string>());
  ctx.progress = opt.progress;
  fs::create_directories(ctx.out);

  const auto t0 = Clock::now();
  std::vector<Diagnostic> diags;
  if (kind == "phantom-gen")
    run_phantom_gen(parse_phantom_gen(cfg, diags), ctx);
  else if (kind == "interp-train")
    run_interp_train(parse_interp_train(cfg, diags), ctx);
  else if (kind == "interp-infer")
    run_interp_infer(parse_interp_infer(cfg, diags), ctx);
  else if (kind == "interp-eval")
    run_interp_eval(parse_interp_eval(cfg, diags), ctx);
  else if (kind == "atlas-train")
    run_atlas_train(parse_atlas_train(cfg, diags), ctx);
  else if (kind == "atlas-infer")
    run_atlas_infer(parse_atlas_infer(cfg, diags), ctx);
  else if (kind == "metrics")
    run_metrics(parse_metrics(cfg, diags), ctx);
  else if (kind == "latent-pca")
    run_latent_pca(parse_latent_pca(cfg, diags), ctx);
  else if (kind == "ablation-explicit")
    run_ablation_explicit(parse_ablation_explicit(cfg, diags), ctx);

  json manifest;
  manifest["schema"] = "NFAMANIFEST1";
  manifest["kind"] = kind;
  manifest["config"] = cfg;
  manifest["config_sha256"] = config_sha256(cfg);
  manifest["seed"] = cfg.contains("seed") ? cfg["seed"].get<std::uint64_t>() : 0;
  manifest["threads"] = opt.threads;
  manifest["versions"] = {
      {"nfa", kNfaVersion},
      {"compiler", __VERSION__},
      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                    "." + std::to_string(EIGEN_MINOR_VERSION)},
      {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  manifest["wall_seconds"] = seconds_since(t0);
  json arts = json::object();
  for (const auto& [rel, sha] : ctx.artifacts) arts[rel] = sha;
  manifest["artifacts"] = arts;
  manifest["timing_artifacts"] = ctx.timing;
  manifest["summary"] = ctx.summary;
  write_json_file(ctx.out / "manifest.json", manifest);

  return RunResult{ctx.out, std::move(manifest)};
}

RerunResult rerun_from_manifest(const fs::path& manifest_path, const RunOptions& opt) {
  const json m = load_experiment_config(manifest_path);
  if (!m.is_object() || m.value("schema", "") != "NFAMANIFEST1" || !m.contains("config"))
    throw std::runtime_error("'" + manifest_path.string() + "' is not an experiment manifest");

  RerunResult rr;
  rr.run = run_experiment(m["config"], opt);

  const json& before = m["artifacts"];
  const json& after = rr.run.manifest["artifacts"];
  for (const auto& item : before.items())
    if (!after.contains(item.key()) || after[item.key()] != item.value())
      rr.mismatched.push_back(item.key());
  for (const auto& item : after.items())
    if (!before.contains(item.key())) rr.mismatched.push_back(item.key());
  std::sort(rr.mismatched.begin(), rr.mismatched.end());
  rr.ok = rr.mismatched.empty();
  return rr;
}

// ---- cohort I/O ------------------------------------------------------------

Cohort load_cohort(const fs::path& dir, const std::vector<std::string>& subset) {
  std::ifstream is(dir / "cohort.json");
  if (!is) throw std::runtime_error("no cohort.json in '" + dir.string() + "'");
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded() || j.value("magic", "") != "NFACOHORT1")
    throw std::runtime_error("'" + (dir / "cohort.json").string() + "' is not a cohort index");

  Cohort c;
  c.num_classes = j.at("n_layers").get<int>() + 1;

  std::map<std::string, json> by_name;
  std::vector<std::string> order;
  for (const auto& e : j.at("subjects")) {
    by_name[e.at("name").get<std::string>()] = e;
    order.push_back(e.at("name").get<std::string>());
  }
  const std::vector<std::string>& names = subset.empty() ? order : subset;
  for (const auto& name : names) {
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::invalid_argument("cohort has no subject named '" + name + "'");
    CohortSubject s;
    s.name = name;
    s.volume = read_volume(dir / it->second.at("volume").get<std::string>());
    s.labels = read_labels(dir / it->second.at("labels").get<std::string>());
    s.enface = read_enface(dir / it->second.at("enface").get<std::string>());
    if (!(s.labels.dims() == s.volume.dims()))
      throw std::runtime_error("cohort subject '" + name + "' has mismatched volume/label dims");
    if (s.labels.num_classes() != c.num_classes)
      throw std::runtime_error("cohort subject '" + name + "' has " +
                               std::to_string(s.labels.num_classes()) + " classes, expected " +
                               std::to_string(c.num_classes));
    c.subjects.push_back(std::move(s));
  }
  return c;
}

Volume subsample_z(const Volume& v, std::int64_t n_keep) {
  const Dims3 d = v.dims();
  const auto kept = slice_schedule(d.nz, n_keep, SliceMode::Equidistant);
  const double stride = static_cast<double>(d.nz - 1) / static_cast<double>(n_keep - 1);
  const Dims3 nd{d.ny, d.nx, n_keep};
  std::vector<float> data(static_cast<std::size_t>(nd.numel()));
  for (std::int64_t iy = 0; iy < d.ny; ++iy)
    for (std::int64_t ix = 0; ix < d.nx; ++ix)
      for (std::int64_t j = 0; j < n_keep; ++j)
        data[static_cast<std::size_t>((iy * d.nx + ix) * n_keep + j)] = v.at(iy, ix, kept[static_cast<std::size_t>(j)]);
  return Volume(nd, Spacing3{v.spacing().sy, v.spacing().sx, v.spacing().sz * stride},
                std::move(data));
}

LabelVolume subsample_z(const LabelVolume& v, std::int64_t n_keep) {
  const Dims3 d = v.dims();
  const auto kept = slice_schedule(d.nz, n_keep, SliceMode::Equidistant);
  const double stride = static_cast<double>(d.nz - 1) / static_cast<double>(n_keep - 1);
  const Dims3 nd{d.ny, d.nx, n_keep};
  std::vector<std::uint8_t> data(static_cast<std::size_t>(nd.numel()));
  for (std::int64_t iy = 0; iy < d.ny; ++iy)
    for (std::int64_t ix = 0; ix < d.nx; ++ix)
      for (std::int64_t j = 0; j < n_keep; ++j)
        data[static_cast<std::size_t>((iy * d.nx + ix) * n_keep + j)] =
            v.at(iy, ix, kept[static_cast<std::size_t>(j)]);
  return LabelVolume(nd, Spacing3{v.spacing().sy, v.spacing().sx, v.spacing().sz * stride},
                     v.num_classes(), std::move(data));
}

// ---- checkpoint adapters ---------------------------------------------------

namespace {

void assign_params(std::vector<TensorF>& dst, const std::vector<TensorF>& src, const char* what) {
  if (dst.size() != src.size())
    throw std::runtime_error(std::string(what) + ": checkpoint has " +
                             std::to_string(src.size()) + " parameter tensors, expected " +
                             std::to_string(dst.size()));
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].shape() != src[i].shape())
      throw std::runtime_error(std::string(what) + ": parameter " + std::to_string(i) +
                               " shape mismatch");
    dst[i] = src[i];
  }
}

void expect_architecture(const Checkpoint& c, const char* arch) {
  if (c.architecture != arch)
    throw std::runtime_error("checkpoint architecture '" + c.architecture + "' is not '" + arch +
                             "'");
}

}  // namespace

Checkpoint make_checkpoint(const InterpNet<float>& net, std::uint64_t seed) {
  const auto& k = net.config();
  Checkpoint c;
  c.architecture = "interp-net";
  c.config = {{"L", k.L},         {"C", k.C},   {"width", k.width},        {"depth", k.depth},
              {"omega0", k.omega0}, {"s0", k.s0}, {"use_enface", k.use_enface}};
  c.seed = seed;
  c.names = net.param_names();
  c.params = to_f32(net.params());
  return c;
}

Checkpoint make_checkpoint(const AtlasNet<float>& net, std::uint64_t seed) {
  const auto& k = net.config();
  Checkpoint c;
  c.architecture = "atlas-net";
  c.config = {{"C", k.C}, {"in_dim", k.in_dim}, {"width", k.width}, {"depth", k.depth},
              {"omega0", k.omega0}};
  c.seed = seed;
  c.names = net.param_names();
  c.params = to_f32(net.params());
  return c;
}

Checkpoint make_checkpoint(const ExplicitAtlas<float>& atlas, std::uint64_t seed) {
  const Dims3& d = atlas.dims();
  Checkpoint c;
  c.architecture = "atlas-explicit";
  c.config = {{"C", atlas.num_classes()}, {"dims", {d.ny, d.nx, d.nz}}};
  c.seed = seed;
  c.names = atlas.param_names();
  c.params = to_f32(atlas.params());
  return c;
}

Checkpoint make_checkpoint(const DisplacementNet<float>& net, std::uint64_t seed) {
  const auto& k = net.config();
  Checkpoint c;
  c.architecture = "displacement-net";
  c.config = {{"L", k.L},
              {"width", k.width},
              {"omega0", k.omega0},
              {"max_disp", k.max_disp},
              {"weight_init", k.weight_init}};
  c.seed = seed;
  c.names = net.param_names();
  c.params = to_f32(net.params());
  return c;
}

Checkpoint make_latent_checkpoint(const std::vector<std::string>& names,
                                  const std::vector<TensorF>& priors, std::uint64_t seed) {
  if (names.size() != priors.size())
    throw std::invalid_argument("make_latent_checkpoint: one name per prior required");
  Checkpoint c;
  c.architecture = "latent-priors";
  std::int64_t L = 0;
  for (const auto& p : priors) {
    if (p.shape().size() != 2 || p.shape()[0] != 1)
      throw std::invalid_argument("make_latent_checkpoint: priors must be [1,L]");
    if (L == 0) L = p.shape()[1];
    if (p.shape()[1] != L)
      throw std::invalid_argument("make_latent_checkpoint: inconsistent latent lengths");
  }
  c.config = {{"L", L}};
  c.seed = seed;
  c.names = names;
  c.params = priors;
  return c;
}

InterpNet<float> interp_net_from_checkpoint(const Checkpoint& ckpt) {
  expect_architecture(ckpt, "interp-net");
  InterpNetConfig<float> k;
  k.L = ckpt.config.at("L").get<std::int64_t>();
  k.C = ckpt.config.at("C").get<std::int64_t>();
  k.width = ckpt.config.at("width").get<std::int64_t>();
  k.depth = ckpt.config.at("depth").get<std::int64_t>();
  k.omega0 = ckpt.config.at("omega0").get<float>();
  k.s0 = ckpt.config.at("s0").get<float>();
  k.use_enface = ckpt.config.at("use_enface").get<bool>();
  Rng rng(0);
  InterpNet<float> net(k, rng);
  assign_params(net.params(), ckpt.params, "interp-net");
  return net;
}

AtlasNet<float> atlas_net_from_checkpoint(const Checkpoint& ckpt) {
  expect_architecture(ckpt, "atlas-net");
  AtlasNetConfig<float> k;
  k.C = ckpt.config.at("C").get<std::int64_t>();
  k.in_dim = ckpt.config.at("in_dim").get<std::int64_t>();
  k.width = ckpt.config.at("width").get<std::int64_t>();
  k.depth = ckpt.config.at("depth").get<std::int64_t>();
  k.omega0 = ckpt.config.at("omega0").get<float>();
  Rng rng(0);
  AtlasNet<float> net(k, rng);
  assign_params(net.params(), ckpt.params, "atlas-net");
  return net;
}

ExplicitAtlas<float> explicit_atlas_from_checkpoint(const Checkpoint& ckpt) {
  expect_architecture(ckpt, "atlas-explicit");
  const auto& dj = ckpt.config.at("dims");
  const Dims3 d{dj.at(0).get<std::int64_t>(), dj.at(1).get<std::int64_t>(),
                dj.at(2).get<std::int64_t>()};
  const int C = ckpt.config.at("C").get<int>();
  const Spacing3 sp{1.0, 1.0, 1.0};
  ExplicitAtlas<float> atlas(Volume::zeros(d, sp), LabelVolume::zeros(d, sp, C));
  assign_params(atlas.params(), ckpt.params, "atlas-explicit");
  return atlas;
}

DisplacementNet<float> displacement_net_from_checkpoint(const Checkpoint& ckpt) {
  expect_architecture(ckpt, "displacement-net");
  DisplacementNetConfig<float> k;
  k.L = ckpt.config.at("L").get<std::int64_t>();
  k.width = ckpt.config.at("width").get<std::int64_t>();
  k.omega0 = ckpt.config.at("omega0").get<float>();
  k.max_disp = ckpt.config.at("max_disp").get<float>();
  k.weight_init = ckpt.config.at("weight_init").get<float>();
  Rng rng(0);
  DisplacementNet<float> net(k, rng);
  assign_params(net.params(), ckpt.params, "displacement-net");
  return net;
}

}  // namespace nfa
