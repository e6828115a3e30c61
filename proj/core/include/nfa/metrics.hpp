#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfa/volume.hpp"

namespace nfa {

// ---- image similarity -----------------------------------------------------

/// MAE in percent: 100 * mean |a-b|. Inputs must have equal length.
double mae_percent(const std::vector<float>& a, const std::vector<float>& b);

/// PSNR in dB against a unit dynamic range: 10*log10(1/MSE), capped at 99 dB
/// (the cap also applies whenever MSE < 1e-10 so identical images report 99).
double psnr_db(const std::vector<float>& a, const std::vector<float>& b);

/// Mean windowed SSIM in percent over a [ny,nx] image pair: 7x7 uniform
/// window (valid positions only), k1=0.01, k2=0.03, dynamic range 1.
double ssim_percent(const std::vector<float>& a, const std::vector<float>& b, std::int64_t ny,
                    std::int64_t nx, int window = 7);

// ---- segmentation overlap -------------------------------------------------

struct DiceResult {
  std::vector<std::uint8_t> classes;  ///< evaluated class labels
  std::vector<double> per_class;      ///< NaN when the class is empty on both sides
  double mean = 0;                    ///< over non-excluded classes; NaN if all excluded
  int n_excluded = 0;                 ///< empty-on-both-sides classes left out of the mean
};

/// Dice in percent per class over two equal-length label buffers.
DiceResult dice_percent(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                        const std::vector<std::uint8_t>& classes);

/// All foreground classes of a C-class labelling: 1..C-1.
std::vector<std::uint8_t> foreground_classes(int num_classes);

// ---- surface distances ----------------------------------------------------

/// Boundary voxels of `cls` in a 2D [ny,nx] label image: label == cls with at
/// least one 4-neighbor of a different label (image edges are not
/// boundaries). Returns (iy, ix) pairs.
std::vector<std::pair<std::int64_t, std::int64_t>> boundary_points_2d(
    const std::vector<std::uint8_t>& labels, std::int64_t ny, std::int64_t nx, std::uint8_t cls);

struct SurfaceDistance {
  double assd = 0;  ///< micrometres
  double hd = 0;    ///< micrometres
  bool missing = false;  ///< either boundary empty; distances are NaN
};

/// Symmetric surface distances between the `cls` boundaries of two [ny,nx]
/// label images. Distances are voxel-center to voxel-center in physical
/// micrometres (spacing per axis), computed with an exact Euclidean distance
/// transform. ASSD pools both directed sums over |P|+|G|; HD is the plain
/// maximum.
SurfaceDistance surface_distance_2d(const std::vector<std::uint8_t>& pred,
                                    const std::vector<std::uint8_t>& gt, std::int64_t ny,
                                    std::int64_t nx, double sy_um, double sx_um, std::uint8_t cls);

/// Exact 1D/2D squared Euclidean distance transform (Felzenszwalb-Huttenlocher)
/// with anisotropic sample spacing; `f` holds 0 at sources and +inf elsewhere.
/// Exposed for direct testing against brute force.
void edt_1d(const std::vector<double>& f, double spacing, std::vector<double>& out);
void edt_2d(std::vector<double>& field, std::int64_t ny, std::int64_t nx, double sy, double sx);

// ---- deformation integrity ------------------------------------------------

/// Batch displacement evaluator: flat (cy,cx,cz) rows in, flat u rows out.
using DispFieldFn =
    std::function<std::vector<double>(const std::vector<double>& coords)>;

struct JacobianStats {
  double neg_fraction_percent = 0;  ///< % of interior voxels with det <= 0
  double mean_det = 0;              ///< over mask (interior voxels only)
  double mean_l1 = 0;               ///< mean ||u||_1 over the full grid
};

/// Central-difference Jacobian of the warp c + u(c) over the normalized grid.
/// `mask` (dims.numel() entries, nonzero = included) restricts mean_det only.
/// Throws if any axis has fewer than 3 voxels.
JacobianStats jacobian_stats(const DispFieldFn& field, const Dims3& dims,
                             const std::vector<std::uint8_t>* mask = nullptr);

// ---- aggregation and reporting --------------------------------------------

struct MetricRow {
  std::string metric;
  std::vector<double> per_bscan;  ///< NaN entries mark missing values
  double mean = 0;                ///< over finite entries
  double stddev = 0;              ///< sample std over finite entries (0 if n<2)
  int n_missing = 0;
};

MetricRow aggregate_row(std::string metric, std::vector<double> per_bscan);

struct MetricReport {
  std::string subject;
  std::string experiment;
  std::string resolution;  ///< e.g. "16/64 slices"
  std::vector<MetricRow> rows;

  void add(std::string metric, std::vector<double> per_bscan);
  void write_csv(std::ostream& os) const;
  nlohmann::json to_json() const;
};

// Volume-level conveniences: one value per B-scan (fixed z index).
MetricRow mae_volume(const Volume& a, const Volume& b);
MetricRow psnr_volume(const Volume& a, const Volume& b);
MetricRow ssim_volume(const Volume& a, const Volume& b);
/// Per-B-scan mean Dice over `classes`.
MetricRow dice_volume(const LabelVolume& pred, const LabelVolume& gt,
                      const std::vector<std::uint8_t>& classes);
/// Per-B-scan mean ASSD / HD over `classes` (classes with a missing boundary
/// are skipped; a B-scan with no valid class is NaN).
std::pair<MetricRow, MetricRow> surface_distance_volume(const LabelVolume& pred,
                                                        const LabelVolume& gt,
                                                        const std::vector<std::uint8_t>& classes);

/// Mean Dice across the whole volume treated as one 3D mask set.
DiceResult dice_volume_3d(const LabelVolume& pred, const LabelVolume& gt,
                          const std::vector<std::uint8_t>& classes);

}  // namespace nfa
