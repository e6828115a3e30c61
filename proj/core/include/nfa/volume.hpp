#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nfa {

/// Axis order throughout: (y axial, x fast-lateral, z slow-lateral).
/// A B-scan is the x-y plane at a fixed slow index z; volumes are stacks of
/// B-scans along z. Storage is row-major over (y, x, z).
struct Dims3 {
  std::int64_t ny = 0, nx = 0, nz = 0;
  std::int64_t numel() const { return ny * nx * nz; }
  bool operator==(const Dims3&) const = default;
};

struct Spacing3 {
  double sy = 1.0, sx = 1.0, sz = 1.0;  ///< mm per voxel
  bool operator==(const Spacing3&) const = default;
};

/// 3D scalar grid with anisotropic physical spacing, values in [0,1].
class Volume {
 public:
  Volume() = default;
  Volume(Dims3 dims, Spacing3 spacing, std::vector<float> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    validate();
  }
  static Volume zeros(Dims3 dims, Spacing3 spacing) {
    return Volume(dims, spacing, std::vector<float>(static_cast<std::size_t>(dims.numel()), 0.f));
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  std::size_t index(std::int64_t iy, std::int64_t ix, std::int64_t iz) const {
    return static_cast<std::size_t>((iy * dims_.nx + ix) * dims_.nz + iz);
  }
  float at(std::int64_t iy, std::int64_t ix, std::int64_t iz) const {
    return data_[index(iy, ix, iz)];
  }
  float& at(std::int64_t iy, std::int64_t ix, std::int64_t iz) {
    return data_[index(iy, ix, iz)];
  }

  /// Copy of B-scan z as a row-major [ny, nx] image.
  std::vector<float> slice(std::int64_t iz) const {
    std::vector<float> out(static_cast<std::size_t>(dims_.ny * dims_.nx));
    for (std::int64_t iy = 0; iy < dims_.ny; ++iy)
      for (std::int64_t ix = 0; ix < dims_.nx; ++ix)
        out[static_cast<std::size_t>(iy * dims_.nx + ix)] = at(iy, ix, iz);
    return out;
  }

 private:
  void validate() const {
    if (dims_.ny < 1 || dims_.nx < 1 || dims_.nz < 1)
      throw std::invalid_argument("Volume: non-positive dims");
    if (!(spacing_.sy > 0 && spacing_.sx > 0 && spacing_.sz > 0))
      throw std::invalid_argument("Volume: spacing must be positive");
    if (static_cast<std::int64_t>(data_.size()) != dims_.numel())
      throw std::invalid_argument("Volume: data size does not match dims");
  }

  Dims3 dims_;
  Spacing3 spacing_;
  std::vector<float> data_;
};

/// 3D integer class grid aligned with a Volume; labels in [0, C).
class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Dims3 dims, Spacing3 spacing, int num_classes, std::vector<std::uint8_t> labels)
      : dims_(dims), spacing_(spacing), num_classes_(num_classes), labels_(std::move(labels)) {
    if (static_cast<std::int64_t>(labels_.size()) != dims_.numel())
      throw std::invalid_argument("LabelVolume: data size does not match dims");
    if (num_classes_ < 1 || num_classes_ > 255)
      throw std::invalid_argument("LabelVolume: class count out of range");
    for (auto l : labels_)
      if (l >= num_classes_) throw std::invalid_argument("LabelVolume: label >= C");
  }
  static LabelVolume zeros(Dims3 dims, Spacing3 spacing, int num_classes) {
    return LabelVolume(dims, spacing, num_classes,
                       std::vector<std::uint8_t>(static_cast<std::size_t>(dims.numel()), 0));
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  int num_classes() const { return num_classes_; }
  const std::vector<std::uint8_t>& labels() const { return labels_; }
  std::vector<std::uint8_t>& labels() { return labels_; }

  std::size_t index(std::int64_t iy, std::int64_t ix, std::int64_t iz) const {
    return static_cast<std::size_t>((iy * dims_.nx + ix) * dims_.nz + iz);
  }
  std::uint8_t at(std::int64_t iy, std::int64_t ix, std::int64_t iz) const {
    return labels_[index(iy, ix, iz)];
  }
  std::uint8_t& at(std::int64_t iy, std::int64_t ix, std::int64_t iz) {
    return labels_[index(iy, ix, iz)];
  }

  std::vector<std::uint8_t> slice(std::int64_t iz) const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(dims_.ny * dims_.nx));
    for (std::int64_t iy = 0; iy < dims_.ny; ++iy)
      for (std::int64_t ix = 0; ix < dims_.nx; ++ix)
        out[static_cast<std::size_t>(iy * dims_.nx + ix)] = at(iy, ix, iz);
    return out;
  }

 private:
  Dims3 dims_;
  Spacing3 spacing_;
  int num_classes_ = 1;
  std::vector<std::uint8_t> labels_;
};

/// 2D scalar image over the lateral (x, z) plane of a Volume, values [0,1].
/// Aligned with the volume's lateral grid: dims equal (nx, nz).
class EnFaceImage {
 public:
  EnFaceImage() = default;
  EnFaceImage(std::int64_t nx, std::int64_t nz, std::vector<float> data)
      : nx_(nx), nz_(nz), data_(std::move(data)) {
    if (nx_ < 1 || nz_ < 1 || static_cast<std::int64_t>(data_.size()) != nx_ * nz_)
      throw std::invalid_argument("EnFaceImage: data size does not match dims");
  }

  std::int64_t nx() const { return nx_; }
  std::int64_t nz() const { return nz_; }
  const std::vector<float>& data() const { return data_; }

  float at(std::int64_t ix, std::int64_t iz) const {
    return data_[static_cast<std::size_t>(ix * nz_ + iz)];
  }
  float& at(std::int64_t ix, std::int64_t iz) {
    return data_[static_cast<std::size_t>(ix * nz_ + iz)];
  }

  /// Bilinear sample at normalized lateral coordinates (x, z) in [-1,1].
  /// Throws if the coordinate lies outside the en-face domain.
  double sample(double cx, double cz) const;

 private:
  std::int64_t nx_ = 0, nz_ = 0;
  std::vector<float> data_;
};

// ---- coordinate convention ------------------------------------------------

/// Voxel index -> normalized coordinate in [-1,1] on an axis with n samples.
/// Each axis maps its full physical extent affinely onto [-1,1]; anisotropy
/// shows up as sample density, not coordinate range. n == 1 maps to 0.
inline double axis_coord(std::int64_t i, std::int64_t n) {
  if (n <= 1) return 0.0;
  return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
}

/// Continuous inverse of axis_coord (fractional voxel position).
inline double axis_frac_index(double c, std::int64_t n) {
  return (c + 1.0) * 0.5 * static_cast<double>(n - 1);
}

struct Coord3 {
  double y = 0, x = 0, z = 0;
};

/// normalize_coords: voxel index -> [-1,1]^3. Throws on out-of-range index.
inline Coord3 normalize_coords(const Dims3& dims, std::int64_t iy, std::int64_t ix,
                               std::int64_t iz) {
  if (iy < 0 || iy >= dims.ny || ix < 0 || ix >= dims.nx || iz < 0 || iz >= dims.nz)
    throw std::out_of_range("normalize_coords: index (" + std::to_string(iy) + "," +
                            std::to_string(ix) + "," + std::to_string(iz) + ") outside dims");
  return {axis_coord(iy, dims.ny), axis_coord(ix, dims.nx), axis_coord(iz, dims.nz)};
}

/// Inverse for exact grid points (rounds the fractional index).
inline std::array<std::int64_t, 3> denormalize_coords(const Dims3& dims, const Coord3& c) {
  auto r = [](double f) { return static_cast<std::int64_t>(std::llround(f)); };
  return {r(axis_frac_index(c.y, dims.ny)), r(axis_frac_index(c.x, dims.nx)),
          r(axis_frac_index(c.z, dims.nz))};
}

// ---- slice scheduling -----------------------------------------------------

enum class SliceMode { Equidistant, EveryKth };

/// Pick n_keep of n_total B-scan indices. Equidistant includes both ends;
/// every_kth takes {0, k, 2k, ...} with k = floor((n_total-1)/(n_keep-1))
/// capped so exactly n_keep indices fit.
std::vector<std::int64_t> slice_schedule(std::int64_t n_total, std::int64_t n_keep, SliceMode mode);

}  // namespace nfa
