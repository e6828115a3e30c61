#include "nfa/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nfa {

std::pair<Volume, LabelVolume> linear_interp_baseline(const Volume& vol, const LabelVolume& labels,
                                                      const std::vector<std::int64_t>& kept) {
  const Dims3& d = vol.dims();
  if (!(labels.dims() == d)) throw std::invalid_argument("linear_interp_baseline: dims mismatch");
  if (kept.size() < 2) throw std::invalid_argument("linear_interp_baseline: need >= 2 kept slices");
  std::vector<std::int64_t> ks = kept;
  std::sort(ks.begin(), ks.end());
  if (std::adjacent_find(ks.begin(), ks.end()) != ks.end())
    throw std::invalid_argument("linear_interp_baseline: duplicate kept slice");
  if (ks.front() < 0 || ks.back() >= d.nz)
    throw std::out_of_range("linear_interp_baseline: kept slice out of range");

  Volume out_v = Volume::zeros(d, vol.spacing());
  LabelVolume out_l = LabelVolume::zeros(d, labels.spacing(), labels.num_classes());

  for (std::int64_t iz = 0; iz < d.nz; ++iz) {
    // Bracketing kept slices; outside the kept range clamp to the nearest.
    auto hi = std::lower_bound(ks.begin(), ks.end(), iz);
    std::int64_t z0, z1;
    if (hi == ks.begin()) {
      z0 = z1 = ks.front();
    } else if (hi == ks.end()) {
      z0 = z1 = ks.back();
    } else {
      z1 = *hi;
      z0 = *(hi - 1);
    }
    const double w = z1 > z0 ? static_cast<double>(iz - z0) / static_cast<double>(z1 - z0) : 0.0;
    for (std::int64_t iy = 0; iy < d.ny; ++iy) {
      for (std::int64_t ix = 0; ix < d.nx; ++ix) {
        const double v0 = vol.at(iy, ix, z0), v1 = vol.at(iy, ix, z1);
        out_v.at(iy, ix, iz) = static_cast<float>((1.0 - w) * v0 + w * v1);
        const double l0 = labels.at(iy, ix, z0), l1 = labels.at(iy, ix, z1);
        // Round half away from zero (labels are non-negative, so llround).
        out_l.at(iy, ix, iz) = static_cast<std::uint8_t>(std::llround((1.0 - w) * l0 + w * l1));
      }
    }
  }
  return {std::move(out_v), std::move(out_l)};
}

}  // namespace nfa
