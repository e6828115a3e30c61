#include "nfa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace nfa {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_equal_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": size mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
}

double mse(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

void require_dims(const Dims3& a, const Dims3& b, const char* op) {
  if (!(a == b)) throw std::invalid_argument(std::string(op) + ": volume dims mismatch");
}

}  // namespace

double mae_percent(const std::vector<float>& a, const std::vector<float>& b) {
  require_equal_size(a.size(), b.size(), "mae");
  if (a.empty()) throw std::invalid_argument("mae: empty input");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return 100.0 * s / static_cast<double>(a.size());
}

double psnr_db(const std::vector<float>& a, const std::vector<float>& b) {
  require_equal_size(a.size(), b.size(), "psnr");
  if (a.empty()) throw std::invalid_argument("psnr: empty input");
  const double m = mse(a, b);
  if (m < 1e-10) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

double ssim_percent(const std::vector<float>& a, const std::vector<float>& b, std::int64_t ny,
                    std::int64_t nx, int window) {
  require_equal_size(a.size(), b.size(), "ssim");
  if (static_cast<std::int64_t>(a.size()) != ny * nx)
    throw std::invalid_argument("ssim: buffer does not match ny*nx");
  if (ny < window || nx < window)
    throw std::invalid_argument("ssim: image smaller than the window");
  const double c1 = 1e-4;  // (0.01 * range)^2
  const double c2 = 9e-4;  // (0.03 * range)^2
  const std::int64_t oh = ny - window + 1, ow = nx - window + 1;
  const double inv = 1.0 / static_cast<double>(window * window);
  double total = 0;
  for (std::int64_t i = 0; i < oh; ++i) {
    for (std::int64_t j = 0; j < ow; ++j) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int di = 0; di < window; ++di) {
        for (int dj = 0; dj < window; ++dj) {
          const double x = a[static_cast<std::size_t>((i + di) * nx + j + dj)];
          const double y = b[static_cast<std::size_t>((i + di) * nx + j + dj)];
          sa += x;
          sb += y;
          saa += x * x;
          sbb += y * y;
          sab += x * y;
        }
      }
      const double ma = sa * inv, mb = sb * inv;
      const double va = saa * inv - ma * ma;
      const double vb = sbb * inv - mb * mb;
      const double cov = sab * inv - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return 100.0 * total / static_cast<double>(oh * ow);
}

std::vector<std::uint8_t> foreground_classes(int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("foreground_classes: need >= 2 classes");
  std::vector<std::uint8_t> out;
  for (int c = 1; c < num_classes; ++c) out.push_back(static_cast<std::uint8_t>(c));
  return out;
}

DiceResult dice_percent(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                        const std::vector<std::uint8_t>& classes) {
  require_equal_size(pred.size(), gt.size(), "dice");
  if (classes.empty()) throw std::invalid_argument("dice: empty class set");
  DiceResult r;
  r.classes = classes;
  double sum = 0;
  int n = 0;
  for (std::uint8_t cls : classes) {
    std::int64_t np = 0, ng = 0, ni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == cls, g = gt[i] == cls;
      np += p;
      ng += g;
      ni += p && g;
    }
    if (np + ng == 0) {
      r.per_class.push_back(kNaN);
      ++r.n_excluded;
    } else {
      const double d = 100.0 * 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
      r.per_class.push_back(d);
      sum += d;
      ++n;
    }
  }
  r.mean = n > 0 ? sum / n : kNaN;
  return r;
}

std::vector<std::pair<std::int64_t, std::int64_t>> boundary_points_2d(
    const std::vector<std::uint8_t>& labels, std::int64_t ny, std::int64_t nx, std::uint8_t cls) {
  if (static_cast<std::int64_t>(labels.size()) != ny * nx)
    throw std::invalid_argument("boundary_points_2d: buffer does not match ny*nx");
  std::vector<std::pair<std::int64_t, std::int64_t>> pts;
  auto at = [&](std::int64_t y, std::int64_t x) { return labels[static_cast<std::size_t>(y * nx + x)]; };
  for (std::int64_t y = 0; y < ny; ++y) {
    for (std::int64_t x = 0; x < nx; ++x) {
      if (at(y, x) != cls) continue;
      const bool b = (y > 0 && at(y - 1, x) != cls) || (y + 1 < ny && at(y + 1, x) != cls) ||
                     (x > 0 && at(y, x - 1) != cls) || (x + 1 < nx && at(y, x + 1) != cls);
      if (b) pts.emplace_back(y, x);
    }
  }
  return pts;
}

void edt_1d(const std::vector<double>& f, double spacing, std::vector<double>& out) {
  const std::int64_t n = static_cast<std::int64_t>(f.size());
  out.assign(f.size(), 0);
  if (n == 0) return;
  // Lower envelope of parabolas d(p) = (p-q)^2*s^2 + f(q).
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  const double s2 = spacing * spacing;
  std::int64_t k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::int64_t q = 1; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    while (true) {
      const std::int64_t p = v[static_cast<std::size_t>(k)];
      if (f[static_cast<std::size_t>(p)] == kInf) {
        // The only parabola so far is at +inf: replace it outright.
        if (k == 0) {
          v[0] = q;
          z[0] = -kInf;
          z[1] = kInf;
          break;
        }
        --k;
        continue;
      }
      const double s = (f[static_cast<std::size_t>(q)] + s2 * static_cast<double>(q * q) -
                        f[static_cast<std::size_t>(p)] - s2 * static_cast<double>(p * p)) /
                       (2.0 * s2 * static_cast<double>(q - p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
        continue;
      }
      ++k;
      v[static_cast<std::size_t>(k)] = q;
      z[static_cast<std::size_t>(k)] = s;
      z[static_cast<std::size_t>(k) + 1] = kInf;
      break;
    }
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < static_cast<double>(q)) ++k;
    const std::int64_t p = v[static_cast<std::size_t>(k)];
    if (f[static_cast<std::size_t>(p)] == kInf) {
      out[static_cast<std::size_t>(q)] = kInf;
    } else {
      const double d = static_cast<double>(q - p);
      out[static_cast<std::size_t>(q)] = d * d * s2 + f[static_cast<std::size_t>(p)];
    }
  }
}

void edt_2d(std::vector<double>& field, std::int64_t ny, std::int64_t nx, double sy, double sx) {
  if (static_cast<std::int64_t>(field.size()) != ny * nx)
    throw std::invalid_argument("edt_2d: buffer does not match ny*nx");
  std::vector<double> line, dline;
  line.reserve(static_cast<std::size_t>(std::max(ny, nx)));
  // Along x within each row, then along y within each column.
  for (std::int64_t y = 0; y < ny; ++y) {
    line.assign(field.begin() + y * nx, field.begin() + (y + 1) * nx);
    edt_1d(line, sx, dline);
    std::copy(dline.begin(), dline.end(), field.begin() + y * nx);
  }
  for (std::int64_t x = 0; x < nx; ++x) {
    line.resize(static_cast<std::size_t>(ny));
    for (std::int64_t y = 0; y < ny; ++y) line[static_cast<std::size_t>(y)] = field[static_cast<std::size_t>(y * nx + x)];
    edt_1d(line, sy, dline);
    for (std::int64_t y = 0; y < ny; ++y) field[static_cast<std::size_t>(y * nx + x)] = dline[static_cast<std::size_t>(y)];
  }
}

SurfaceDistance surface_distance_2d(const std::vector<std::uint8_t>& pred,
                                    const std::vector<std::uint8_t>& gt, std::int64_t ny,
                                    std::int64_t nx, double sy_um, double sx_um, std::uint8_t cls) {
  if (sy_um <= 0 || sx_um <= 0)
    throw std::invalid_argument("surface_distance_2d: spacing must be positive");
  require_equal_size(pred.size(), gt.size(), "surface_distance_2d");
  const auto bp = boundary_points_2d(pred, ny, nx, cls);
  const auto bg = boundary_points_2d(gt, ny, nx, cls);
  SurfaceDistance r;
  if (bp.empty() || bg.empty()) {
    r.missing = true;
    r.assd = kNaN;
    r.hd = kNaN;
    return r;
  }
  auto dt_of = [&](const std::vector<std::pair<std::int64_t, std::int64_t>>& pts) {
    std::vector<double> field(static_cast<std::size_t>(ny * nx), kInf);
    for (const auto& [y, x] : pts) field[static_cast<std::size_t>(y * nx + x)] = 0;
    edt_2d(field, ny, nx, sy_um, sx_um);
    return field;
  };
  const auto dt_gt = dt_of(bg);
  const auto dt_pred = dt_of(bp);
  double sum = 0, mx = 0;
  for (const auto& [y, x] : bp) {
    const double d = std::sqrt(dt_gt[static_cast<std::size_t>(y * nx + x)]);
    sum += d;
    mx = std::max(mx, d);
  }
  for (const auto& [y, x] : bg) {
    const double d = std::sqrt(dt_pred[static_cast<std::size_t>(y * nx + x)]);
    sum += d;
    mx = std::max(mx, d);
  }
  r.assd = sum / static_cast<double>(bp.size() + bg.size());
  r.hd = mx;
  return r;
}

JacobianStats jacobian_stats(const DispFieldFn& field, const Dims3& dims,
                             const std::vector<std::uint8_t>* mask) {
  if (dims.ny < 3 || dims.nx < 3 || dims.nz < 3)
    throw std::invalid_argument("jacobian_stats: need at least 3 voxels per axis");
  if (mask && static_cast<std::int64_t>(mask->size()) != dims.numel())
    throw std::invalid_argument("jacobian_stats: mask size mismatch");

  const std::int64_t N = dims.numel();
  std::vector<double> coords(static_cast<std::size_t>(N) * 3);
  std::size_t w = 0;
  for (std::int64_t iy = 0; iy < dims.ny; ++iy)
    for (std::int64_t ix = 0; ix < dims.nx; ++ix)
      for (std::int64_t iz = 0; iz < dims.nz; ++iz) {
        coords[w++] = axis_coord(iy, dims.ny);
        coords[w++] = axis_coord(ix, dims.nx);
        coords[w++] = axis_coord(iz, dims.nz);
      }
  const std::vector<double> u = field(coords);
  if (u.size() != coords.size())
    throw std::invalid_argument("jacobian_stats: field returned wrong size");

  JacobianStats out;
  double l1 = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    const std::size_t b = static_cast<std::size_t>(i) * 3;
    l1 += std::abs(u[b]) + std::abs(u[b + 1]) + std::abs(u[b + 2]);
  }
  out.mean_l1 = l1 / static_cast<double>(N);

  const double hy = 2.0 / static_cast<double>(dims.ny - 1);
  const double hx = 2.0 / static_cast<double>(dims.nx - 1);
  const double hz = 2.0 / static_cast<double>(dims.nz - 1);
  auto idx = [&](std::int64_t iy, std::int64_t ix, std::int64_t iz) {
    return static_cast<std::size_t>(((iy * dims.nx) + ix) * dims.nz + iz) * 3;
  };
  // warp = c + u; derivative along axis b of component a.
  auto warp = [&](std::size_t base, int comp, std::int64_t iy, std::int64_t ix, std::int64_t iz) {
    const double c = comp == 0 ? axis_coord(iy, dims.ny)
                   : comp == 1 ? axis_coord(ix, dims.nx)
                               : axis_coord(iz, dims.nz);
    return c + u[base + static_cast<std::size_t>(comp)];
  };
  std::int64_t n_all = 0, n_neg = 0, n_mask = 0;
  double det_sum = 0;
  for (std::int64_t iy = 1; iy + 1 < dims.ny; ++iy)
    for (std::int64_t ix = 1; ix + 1 < dims.nx; ++ix)
      for (std::int64_t iz = 1; iz + 1 < dims.nz; ++iz) {
        double J[3][3];
        for (int a = 0; a < 3; ++a) {
          J[a][0] = (warp(idx(iy + 1, ix, iz), a, iy + 1, ix, iz) -
                     warp(idx(iy - 1, ix, iz), a, iy - 1, ix, iz)) /
                    (2 * hy);
          J[a][1] = (warp(idx(iy, ix + 1, iz), a, iy, ix + 1, iz) -
                     warp(idx(iy, ix - 1, iz), a, iy, ix - 1, iz)) /
                    (2 * hx);
          J[a][2] = (warp(idx(iy, ix, iz + 1), a, iy, ix, iz + 1) -
                     warp(idx(iy, ix, iz - 1), a, iy, ix, iz - 1)) /
                    (2 * hz);
        }
        const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        ++n_all;
        if (det <= 0) ++n_neg;
        const bool in_mask =
            !mask || (*mask)[static_cast<std::size_t>((iy * dims.nx + ix) * dims.nz + iz)] != 0;
        if (in_mask) {
          det_sum += det;
          ++n_mask;
        }
      }
  out.neg_fraction_percent = 100.0 * static_cast<double>(n_neg) / static_cast<double>(n_all);
  out.mean_det = n_mask > 0 ? det_sum / static_cast<double>(n_mask) : kNaN;
  return out;
}

MetricRow aggregate_row(std::string metric, std::vector<double> per_bscan) {
  MetricRow row;
  row.metric = std::move(metric);
  row.per_bscan = std::move(per_bscan);
  double sum = 0;
  std::int64_t n = 0;
  for (double v : row.per_bscan) {
    if (std::isnan(v)) {
      ++row.n_missing;
    } else {
      sum += v;
      ++n;
    }
  }
  if (n == 0) {
    row.mean = kNaN;
    row.stddev = kNaN;
    return row;
  }
  row.mean = sum / static_cast<double>(n);
  if (n >= 2) {
    double ss = 0;
    for (double v : row.per_bscan)
      if (!std::isnan(v)) ss += (v - row.mean) * (v - row.mean);
    row.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return row;
}

void MetricReport::add(std::string metric, std::vector<double> per_bscan) {
  rows.push_back(aggregate_row(std::move(metric), std::move(per_bscan)));
}

void MetricReport::write_csv(std::ostream& os) const {
  os << "# subject=" << subject << " experiment=" << experiment << " resolution=" << resolution
     << "\n";
  os << "# empty-class Dice and empty-boundary distances are excluded from means\n";
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.per_bscan.size());
  os << "metric,mean,std,n_missing";
  for (std::size_t i = 0; i < width; ++i) os << ",b" << i;
  os << "\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.metric << "," << r.mean << "," << r.stddev << "," << r.n_missing;
    for (double v : r.per_bscan) os << "," << v;
    os << "\n";
  }
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["subject"] = subject;
  j["experiment"] = experiment;
  j["resolution"] = resolution;
  j["note"] = "empty-class Dice and empty-boundary distances are excluded from means";
  nlohmann::json rowsj = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json rj;
    rj["metric"] = r.metric;
    rj["mean"] = r.mean;
    rj["std"] = r.stddev;
    rj["n_missing"] = r.n_missing;
    // NaN is not representable in JSON; emit nulls.
    nlohmann::json vals = nlohmann::json::array();
    for (double v : r.per_bscan) {
      if (std::isnan(v))
        vals.push_back(nullptr);
      else
        vals.push_back(v);
    }
    rj["per_bscan"] = vals;
    rowsj.push_back(rj);
  }
  j["rows"] = rowsj;
  return j;
}

MetricRow mae_volume(const Volume& a, const Volume& b) {
  require_dims(a.dims(), b.dims(), "mae_volume");
  std::vector<double> per;
  for (std::int64_t iz = 0; iz < a.dims().nz; ++iz)
    per.push_back(mae_percent(a.slice(iz), b.slice(iz)));
  return aggregate_row("mae", std::move(per));
}

MetricRow psnr_volume(const Volume& a, const Volume& b) {
  require_dims(a.dims(), b.dims(), "psnr_volume");
  std::vector<double> per;
  for (std::int64_t iz = 0; iz < a.dims().nz; ++iz)
    per.push_back(psnr_db(a.slice(iz), b.slice(iz)));
  return aggregate_row("psnr", std::move(per));
}

MetricRow ssim_volume(const Volume& a, const Volume& b) {
  require_dims(a.dims(), b.dims(), "ssim_volume");
  std::vector<double> per;
  for (std::int64_t iz = 0; iz < a.dims().nz; ++iz)
    per.push_back(ssim_percent(a.slice(iz), b.slice(iz), a.dims().ny, a.dims().nx));
  return aggregate_row("ssim", std::move(per));
}

MetricRow dice_volume(const LabelVolume& pred, const LabelVolume& gt,
                      const std::vector<std::uint8_t>& classes) {
  require_dims(pred.dims(), gt.dims(), "dice_volume");
  std::vector<double> per;
  for (std::int64_t iz = 0; iz < pred.dims().nz; ++iz)
    per.push_back(dice_percent(pred.slice(iz), gt.slice(iz), classes).mean);
  return aggregate_row("dice", std::move(per));
}

std::pair<MetricRow, MetricRow> surface_distance_volume(const LabelVolume& pred,
                                                        const LabelVolume& gt,
                                                        const std::vector<std::uint8_t>& classes) {
  require_dims(pred.dims(), gt.dims(), "surface_distance_volume");
  const double sy_um = gt.spacing().sy * 1000.0;
  const double sx_um = gt.spacing().sx * 1000.0;
  std::vector<double> assd_per, hd_per;
  for (std::int64_t iz = 0; iz < pred.dims().nz; ++iz) {
    const auto ps = pred.slice(iz);
    const auto gs = gt.slice(iz);
    double sa = 0, sh = 0;
    int n = 0;
    for (std::uint8_t cls : classes) {
      const auto d =
          surface_distance_2d(ps, gs, pred.dims().ny, pred.dims().nx, sy_um, sx_um, cls);
      if (!d.missing) {
        sa += d.assd;
        sh += d.hd;
        ++n;
      }
    }
    assd_per.push_back(n > 0 ? sa / n : kNaN);
    hd_per.push_back(n > 0 ? sh / n : kNaN);
  }
  return {aggregate_row("assd_um", std::move(assd_per)), aggregate_row("hd_um", std::move(hd_per))};
}

DiceResult dice_volume_3d(const LabelVolume& pred, const LabelVolume& gt,
                          const std::vector<std::uint8_t>& classes) {
  require_dims(pred.dims(), gt.dims(), "dice_volume_3d");
  return dice_percent(pred.labels(), gt.labels(), classes);
}

}  // namespace nfa
