#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfa/atlas.hpp"
#include "nfa/checkpoint.hpp"
#include "nfa/nets.hpp"
#include "nfa/volume.hpp"

namespace nfa {

/// One config-validation finding.
struct Diagnostic {
  std::string field;
  std::string message;
};

/// Thrown by run_experiment on an invalid config; carries every finding.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<Diagnostic> diags);
  const std::vector<Diagnostic>& diagnostics() const { return diags_; }

 private:
  std::vector<Diagnostic> diags_;
};

/// Reads and parses a JSON config. Throws std::runtime_error for unreadable
/// files or parse errors.
nlohmann::json load_experiment_config(const std::filesystem::path& path);

/// Static validation: kind known, no unknown keys, types and ranges sane,
/// referenced input paths exist. Touches no output paths. Empty = valid.
std::vector<Diagnostic> validate_experiment(const nlohmann::json& cfg);

struct RunOptions {
  std::string output_dir;              ///< overrides config "output_dir" when set
  std::optional<std::uint64_t> seed;   ///< overrides config "seed"
  int threads = 1;                     ///< recorded in the manifest; pipelines are single-threaded
  std::ostream* progress = nullptr;    ///< epoch progress sink (CLI: stderr); null = silent
};

struct RunResult {
  std::filesystem::path out_dir;
  nlohmann::json manifest;
};

/// Runs one experiment. Throws ConfigError for invalid configs and
/// std::runtime_error for runtime failures. On success the output directory
/// holds the declared artifacts plus manifest.json; nothing is written
/// elsewhere. manifest["artifacts"] maps each deterministic artifact to its
/// SHA-256; wall-clock-bearing files are listed under "timing_artifacts" and
/// excluded from reproducibility comparisons.
RunResult run_experiment(nlohmann::json cfg, const RunOptions& opt = {});

/// Re-executes the run recorded in a manifest and compares the fresh
/// deterministic artifact hashes against the recorded ones.
struct RerunResult {
  RunResult run;
  std::vector<std::string> mismatched;  ///< artifact names that differ or are missing
  bool ok = false;
};
RerunResult rerun_from_manifest(const std::filesystem::path& manifest_path, const RunOptions& opt);

/// SHA-256 of the config with "output_dir" dropped, over the compact dump;
/// identifies an experiment independent of where it writes.
std::string config_sha256(const nlohmann::json& cfg);

// ---- phantom cohorts on disk ----------------------------------------------

struct CohortSubject {
  std::string name;
  Volume volume;
  LabelVolume labels;
  EnFaceImage enface;
};

struct Cohort {
  int num_classes = 0;
  std::vector<CohortSubject> subjects;
};

/// Loads a cohort written by the phantom-gen experiment (cohort.json plus the
/// per-subject NFAVOL1 files). `subset` selects subjects by name in the given
/// order; empty keeps all. Throws std::runtime_error for malformed cohorts
/// and std::invalid_argument for unknown subject names.
Cohort load_cohort(const std::filesystem::path& dir, const std::vector<std::string>& subset = {});

/// Keeps n_keep equidistant z-slices as a standalone volume; the slow-axis
/// spacing is scaled by the slice stride so physical extent is preserved.
Volume subsample_z(const Volume& v, std::int64_t n_keep);
LabelVolume subsample_z(const LabelVolume& v, std::int64_t n_keep);

// ---- checkpoint adapters ---------------------------------------------------

Checkpoint make_checkpoint(const InterpNet<float>& net, std::uint64_t seed);
Checkpoint make_checkpoint(const AtlasNet<float>& net, std::uint64_t seed);
Checkpoint make_checkpoint(const ExplicitAtlas<float>& atlas, std::uint64_t seed);
Checkpoint make_checkpoint(const DisplacementNet<float>& net, std::uint64_t seed);
/// Latent priors: one [1,L] tensor per subject under its name.
Checkpoint make_latent_checkpoint(const std::vector<std::string>& names,
                                  const std::vector<TensorF>& priors, std::uint64_t seed);

/// Rebuild a model from its checkpoint. Throws std::runtime_error when the
/// architecture tag or parameter shapes do not match.
InterpNet<float> interp_net_from_checkpoint(const Checkpoint& ckpt);
AtlasNet<float> atlas_net_from_checkpoint(const Checkpoint& ckpt);
ExplicitAtlas<float> explicit_atlas_from_checkpoint(const Checkpoint& ckpt);
DisplacementNet<float> displacement_net_from_checkpoint(const Checkpoint& ckpt);

}  // namespace nfa
