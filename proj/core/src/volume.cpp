#include "nfa/volume.hpp"

#include <cmath>

namespace nfa {

double EnFaceImage::sample(double cx, double cz) const {
  const double eps = 1e-9;
  if (cx < -1.0 - eps || cx > 1.0 + eps || cz < -1.0 - eps || cz > 1.0 + eps)
    throw std::out_of_range("EnFaceImage::sample: lateral coordinate (" + std::to_string(cx) +
                            "," + std::to_string(cz) + ") outside the en-face domain");
  const double fx = axis_frac_index(std::clamp(cx, -1.0, 1.0), nx_);
  const double fz = axis_frac_index(std::clamp(cz, -1.0, 1.0), nz_);
  const std::int64_t ix = std::min(static_cast<std::int64_t>(std::floor(fx)),
                                   nx_ > 1 ? nx_ - 2 : std::int64_t(0));
  const std::int64_t iz = std::min(static_cast<std::int64_t>(std::floor(fz)),
                                   nz_ > 1 ? nz_ - 2 : std::int64_t(0));
  const double wx = nx_ > 1 ? fx - static_cast<double>(ix) : 0.0;
  const double wz = nz_ > 1 ? fz - static_cast<double>(iz) : 0.0;
  const std::int64_t ix1 = nx_ > 1 ? ix + 1 : ix;
  const std::int64_t iz1 = nz_ > 1 ? iz + 1 : iz;
  return (1 - wx) * (1 - wz) * at(ix, iz) + wx * (1 - wz) * at(ix1, iz) +
         (1 - wx) * wz * at(ix, iz1) + wx * wz * at(ix1, iz1);
}

std::vector<std::int64_t> slice_schedule(std::int64_t n_total, std::int64_t n_keep,
                                         SliceMode mode) {
  if (n_keep < 2 || n_keep > n_total)
    throw std::invalid_argument("slice_schedule: n_keep=" + std::to_string(n_keep) +
                                " out of range [2," + std::to_string(n_total) + "]");
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(n_keep));
  if (mode == SliceMode::Equidistant) {
    for (std::int64_t j = 0; j < n_keep; ++j) {
      const double pos = static_cast<double>(j) * static_cast<double>(n_total - 1) /
                         static_cast<double>(n_keep - 1);
      out.push_back(static_cast<std::int64_t>(std::llround(pos)));
    }
  } else {
    const std::int64_t k = std::max<std::int64_t>(1, (n_total - 1) / (n_keep - 1));
    for (std::int64_t j = 0; j < n_keep; ++j) out.push_back(j * k);
  }
  return out;
}

}  // namespace nfa
