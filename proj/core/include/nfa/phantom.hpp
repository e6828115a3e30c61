#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nfa/volume.hpp"

namespace nfa {

/// Synthetic layered retina phantom: smoothly undulating stacked layer
/// surfaces with per-layer characteristic intensity, multiplicative speckle,
/// vessels in the top layer casting axial shadows, and a depth-projected
/// en-face image that encodes the lateral vessel positions.
struct PhantomSpec {
  Dims3 dims{64, 96, 64};
  Spacing3 spacing{2.0 / 64.0, 6.0 / 96.0, 6.0 / 64.0};  ///< OCT-like anisotropy
  int n_layers = 8;                ///< layer classes; labels are 0=background, 1..n_layers

  double surface_amp_min = 1.0;    ///< surface undulation amplitude range (voxels)
  double surface_amp_max = 3.0;
  double surface_freq_min = 0.5;   ///< cycles across the lateral extent
  double surface_freq_max = 1.5;
  double thickness_jitter = 0.25;  ///< relative per-layer thickness variation
  double thickness_scale = 1.0;    ///< overall retina thickness multiplier

  int vessel_count = 2;
  double vessel_radius = 1.6;      ///< voxels
  double vessel_drift_amp = 6.0;   ///< lateral drift amplitude along z (voxels)
  double vessel_shadow = 0.45;     ///< shadow intensity multiplier

  double noise_level = 0.15;       ///< multiplicative speckle in [1-eta, 1+eta]
  bool fovea_pit = true;

  /// When set, large-scale surface geometry is drawn from this seed and only
  /// a smooth per-subject deformation is drawn from `seed`; used to build
  /// registration cohorts that share a common template.
  std::optional<std::uint64_t> template_seed;
  double deform_amp = 0.0;         ///< per-subject surface deformation (voxels)

  std::uint64_t seed = 0;
};

struct Phantom {
  Volume volume;
  LabelVolume labels;
  EnFaceImage enface;
  /// Ground-truth lateral vessel-center position x(z), in voxels, per vessel.
  std::vector<std::vector<double>> vessel_paths;
};

/// Deterministic under spec+seed. Throws std::runtime_error if ordered,
/// non-crossing surfaces cannot be sampled within a bounded number of
/// attempts.
Phantom phantom_generate(const PhantomSpec& spec);

}  // namespace nfa
