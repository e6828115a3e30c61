#include "nfa/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nfa/rng.hpp"

namespace nfa {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kMinThickness = 0.6;
constexpr int kMaxAttempts = 64;

struct Wave {
  double amp, fx, fz, px, pz;
};

// Smooth band-limited lateral field, sum of separable sinusoids.
struct Field2D {
  std::vector<Wave> waves;
  double eval(double u, double v) const {
    double s = 0.0;
    for (const Wave& w : waves)
      s += w.amp * std::sin(kTwoPi * (w.fx * u + w.px)) * std::sin(kTwoPi * (w.fz * v + w.pz));
    return s;
  }
};

Field2D random_field(Rng& rng, double amp_lo, double amp_hi, double f_lo, double f_hi,
                     int n_waves) {
  Field2D f;
  f.waves.reserve(n_waves);
  for (int i = 0; i < n_waves; ++i) {
    const double scale = (i == 0) ? 1.0 : 0.5;
    f.waves.push_back({scale * rng.uniform(amp_lo, amp_hi), rng.uniform(f_lo, f_hi),
                       rng.uniform(f_lo, f_hi), rng.uniform(), rng.uniform()});
  }
  return f;
}

struct VesselGeo {
  double x0, freq, phase;  // x0 in voxels, freq in cycles along z
};

struct Geometry {
  double top_base = 0.0;
  Field2D top_wave;
  std::vector<double> base_t;       // per-layer mean thickness, n_layers-1 entries
  std::vector<Field2D> thick_mod;   // relative modulation in [-1,1]
  double pit_depth = 0.0, pit_su = 1.0, pit_sv = 1.0, pit_cu = 0.5, pit_cv = 0.5;
  std::vector<double> palette;      // intensity per class, background first
  std::vector<VesselGeo> vessels;
};

Geometry draw_geometry(Rng& rng, const PhantomSpec& spec) {
  const double ny = static_cast<double>(spec.dims.ny);
  const double nx = static_cast<double>(spec.dims.nx);
  Geometry g;

  g.top_base = ny * rng.uniform(0.13, 0.19);
  g.top_wave = random_field(rng, spec.surface_amp_min, spec.surface_amp_max,
                            spec.surface_freq_min, spec.surface_freq_max, 2);

  const int n_explicit = spec.n_layers - 1;
  const double mean_t = 0.50 * ny * spec.thickness_scale / spec.n_layers;
  g.base_t.resize(n_explicit);
  g.thick_mod.resize(n_explicit);
  for (int k = 0; k < n_explicit; ++k) {
    g.base_t[k] = mean_t * rng.uniform(0.75, 1.25);
    g.thick_mod[k] = random_field(rng, 0.5 * spec.thickness_jitter, spec.thickness_jitter,
                                  spec.surface_freq_min, spec.surface_freq_max, 2);
  }

  if (spec.fovea_pit) {
    g.pit_depth = ny * rng.uniform(0.06, 0.11);
    g.pit_su = rng.uniform(0.10, 0.16);
    g.pit_sv = rng.uniform(0.10, 0.16);
    g.pit_cu = 0.5 + rng.uniform(-0.08, 0.08);
    g.pit_cv = 0.5 + rng.uniform(-0.08, 0.08);
  }

  g.palette.resize(spec.n_layers + 1);
  g.palette[0] = 0.05;
  for (int k = 1; k <= spec.n_layers; ++k)
    g.palette[k] = (k % 2 == 1) ? rng.uniform(0.55, 0.90) : rng.uniform(0.18, 0.42);

  const double margin = spec.vessel_drift_amp + 3.0 * spec.vessel_radius + 2.0;
  for (int v = 0; v < spec.vessel_count; ++v) {
    if (2.0 * margin >= nx - 1.0)
      throw std::invalid_argument("phantom_generate: lateral extent too small for vessel drift");
    g.vessels.push_back({rng.uniform(margin, nx - 1.0 - margin), rng.uniform(0.5, 1.2),
                         rng.uniform()});
  }
  return g;
}

struct Deformation {
  Field2D dtop;
  std::vector<Field2D> dthick;
  bool active = false;
};

}  // namespace

Phantom phantom_generate(const PhantomSpec& spec) {
  const auto& d = spec.dims;
  if (d.ny < 8 || d.nx < 2 || d.nz < 2)
    throw std::invalid_argument("phantom_generate: dims too small (need ny>=8, nx>=2, nz>=2)");
  if (spec.n_layers < 1 || spec.n_layers > 200)
    throw std::invalid_argument("phantom_generate: n_layers out of range");
  if (spec.noise_level < 0.0 || spec.noise_level >= 1.0)
    throw std::invalid_argument("phantom_generate: noise_level must be in [0,1)");
  if (spec.thickness_scale <= 0.0)
    throw std::invalid_argument("phantom_generate: thickness_scale must be positive");
  if (spec.vessel_count < 0 || spec.vessel_radius < 0.0 || spec.vessel_drift_amp < 0.0)
    throw std::invalid_argument("phantom_generate: negative vessel parameter");
  if (spec.vessel_shadow <= 0.0 || spec.vessel_shadow > 1.0)
    throw std::invalid_argument("phantom_generate: vessel_shadow must be in (0,1]");

  const std::int64_t ny = d.ny, nx = d.nx, nz = d.nz;
  const int n_explicit = spec.n_layers - 1;

  Rng geo_rng(spec.template_seed ? *spec.template_seed : spec.seed);
  Rng subj_rng = Rng(spec.seed).fork(0x70686172UL);

  // Subject geometry: top surface plus strictly positive layer thicknesses.
  // Resample whole parameter sets until the stack fits the volume with room
  // for background above and the deepest layer below.
  Geometry geo;
  auto lateral_ok = [&](const Geometry& g) {
    for (std::int64_t ix = 0; ix < nx; ++ix) {
      const double u = (nx > 1) ? static_cast<double>(ix) / (nx - 1) : 0.0;
      for (std::int64_t iz = 0; iz < nz; ++iz) {
        const double v = (nz > 1) ? static_cast<double>(iz) / (nz - 1) : 0.0;
        double top = g.top_base + g.top_wave.eval(u, v);
        if (spec.fovea_pit) {
          const double eu = (u - g.pit_cu) / g.pit_su, ev = (v - g.pit_cv) / g.pit_sv;
          top += g.pit_depth * std::exp(-0.5 * (eu * eu + ev * ev));
        }
        if (top < 1.0) return false;
        double depth = top;
        for (int k = 0; k < n_explicit; ++k) {
          const double t = g.base_t[k] * (1.0 + g.thick_mod[k].eval(u, v));
          if (t < kMinThickness) return false;
          depth += t;
        }
        if (depth > static_cast<double>(ny) - 2.0) return false;
      }
    }
    return true;
  };
  bool accepted = false;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    geo = draw_geometry(geo_rng, spec);
    if (lateral_ok(geo)) {
      accepted = true;
      break;
    }
  }
  if (!accepted)
    throw std::runtime_error(
        "phantom_generate: could not sample non-crossing layer surfaces within " +
        std::to_string(kMaxAttempts) + " attempts; amplitude/thickness spec too extreme");

  Deformation def;
  if (spec.deform_amp > 0.0) {
    def.active = true;
    def.dtop = random_field(subj_rng, 0.5 * spec.deform_amp, spec.deform_amp, 0.3, 0.9, 2);
    def.dthick.resize(n_explicit);
    for (int k = 0; k < n_explicit; ++k)
      def.dthick[k] = random_field(subj_rng, 0.3 * spec.deform_amp, 0.6 * spec.deform_amp,
                                   0.3, 0.9, 2);
  }

  // Continuous surface stack at lateral (u,v). Deformations are clamped and
  // the stack rescaled so ordering and bounds hold constructively.
  auto surface_stack = [&](double u, double v, std::vector<double>& s) {
    double top = geo.top_base + geo.top_wave.eval(u, v);
    double pit_shape = 0.0;
    if (spec.fovea_pit) {
      const double eu = (u - geo.pit_cu) / geo.pit_su, ev = (v - geo.pit_cv) / geo.pit_sv;
      pit_shape = std::exp(-0.5 * (eu * eu + ev * ev));
      top += geo.pit_depth * pit_shape;
    }
    if (def.active) top += def.dtop.eval(u, v);
    top = std::clamp(top, 1.0, 0.6 * static_cast<double>(ny));

    s.resize(static_cast<std::size_t>(n_explicit) + 1);
    double sum_t = 0.0;
    std::vector<double> t(n_explicit);
    for (int k = 0; k < n_explicit; ++k) {
      double tk = geo.base_t[k] * (1.0 + geo.thick_mod[k].eval(u, v));
      if (spec.fovea_pit && k < std::min(3, n_explicit))
        tk *= 1.0 - 0.55 * pit_shape;
      if (def.active) tk += def.dthick[k].eval(u, v);
      tk = std::max(tk, kMinThickness);
      t[k] = tk;
      sum_t += tk;
    }
    const double room = static_cast<double>(ny) - 2.0 - top;
    const double scale = (sum_t > room && sum_t > 0.0) ? room / sum_t : 1.0;
    s[0] = top;
    for (int k = 0; k < n_explicit; ++k) s[static_cast<std::size_t>(k) + 1] = s[k] + t[k] * scale;
  };

  // Evaluate all surfaces on the lateral grid.
  const std::int64_t nlat = nx * nz;
  std::vector<std::vector<double>> surf(static_cast<std::size_t>(spec.n_layers),
                                        std::vector<double>(static_cast<std::size_t>(nlat)));
  {
    std::vector<double> s;
    for (std::int64_t ix = 0; ix < nx; ++ix) {
      const double u = (nx > 1) ? static_cast<double>(ix) / (nx - 1) : 0.0;
      for (std::int64_t iz = 0; iz < nz; ++iz) {
        const double v = (nz > 1) ? static_cast<double>(iz) / (nz - 1) : 0.0;
        surface_stack(u, v, s);
        for (int k = 0; k < spec.n_layers; ++k)
          surf[static_cast<std::size_t>(k)][static_cast<std::size_t>(ix * nz + iz)] = s[k];
      }
    }
  }

  // Labels: count of surfaces above the voxel. Intensity starts as the pure
  // palette value so noise_level 0 and no vessels gives piecewise-constant
  // output.
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(d.numel()));
  std::vector<double> inten(static_cast<std::size_t>(d.numel()));
  for (std::int64_t iy = 0; iy < ny; ++iy) {
    for (std::int64_t ix = 0; ix < nx; ++ix) {
      for (std::int64_t iz = 0; iz < nz; ++iz) {
        const std::size_t lat = static_cast<std::size_t>(ix * nz + iz);
        int lab = 0;
        while (lab < spec.n_layers && surf[static_cast<std::size_t>(lab)][lat] <= static_cast<double>(iy))
          ++lab;
        const std::size_t idx = static_cast<std::size_t>((iy * nx + ix) * nz + iz);
        labels[idx] = static_cast<std::uint8_t>(lab);
        inten[idx] = geo.palette[static_cast<std::size_t>(lab)];
      }
    }
  }

  // Vessels ride just under the top surface and cast axial shadows.
  std::vector<std::vector<double>> vessel_paths(geo.vessels.size(),
                                                std::vector<double>(static_cast<std::size_t>(nz)));
  const double r = spec.vessel_radius;
  for (std::size_t vi = 0; vi < geo.vessels.size(); ++vi) {
    const VesselGeo& vg = geo.vessels[vi];
    for (std::int64_t iz = 0; iz < nz; ++iz) {
      const double v = (nz > 1) ? static_cast<double>(iz) / (nz - 1) : 0.0;
      const double xv = vg.x0 + spec.vessel_drift_amp * std::sin(kTwoPi * (vg.freq * v + vg.phase));
      vessel_paths[vi][static_cast<std::size_t>(iz)] = xv;
      const std::size_t lat0 = static_cast<std::size_t>(
          std::clamp<std::int64_t>(static_cast<std::int64_t>(std::llround(xv)), 0, nx - 1) * nz + iz);
      const double yv = surf[0][lat0] + 1.0 + r;

      const std::int64_t x_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(xv - 4.0 * r)));
      const std::int64_t x_hi = std::min<std::int64_t>(nx - 1, static_cast<std::int64_t>(std::ceil(xv + 4.0 * r)));
      for (std::int64_t ix = x_lo; ix <= x_hi; ++ix) {
        const double dx = static_cast<double>(ix) - xv;
        const double shadow =
            1.0 - (1.0 - spec.vessel_shadow) * std::exp(-0.5 * (dx * dx) / (r * r));
        for (std::int64_t iy = 0; iy < ny; ++iy) {
          const std::size_t idx = static_cast<std::size_t>((iy * nx + ix) * nz + iz);
          const double dy = static_cast<double>(iy) - yv;
          if (r > 0.0) {
            const double q = (dx * dx + dy * dy) / (0.64 * r * r);
            inten[idx] *= 1.0 - 0.25 * std::exp(-0.5 * q);
          }
          if (static_cast<double>(iy) > yv) inten[idx] *= shadow;
        }
      }
    }
  }

  // En-face: mean of the vessel-shadowed, pre-speckle intensity below the top
  // surface. Vessel columns end up darker, layer brightness shows through.
  std::vector<float> ef(static_cast<std::size_t>(nlat));
  for (std::int64_t ix = 0; ix < nx; ++ix) {
    for (std::int64_t iz = 0; iz < nz; ++iz) {
      const std::size_t lat = static_cast<std::size_t>(ix * nz + iz);
      const std::int64_t y0 =
          std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(surf[0][lat])), 0, ny - 1);
      double acc = 0.0;
      for (std::int64_t iy = y0; iy < ny; ++iy)
        acc += inten[static_cast<std::size_t>((iy * nx + ix) * nz + iz)];
      ef[lat] = static_cast<float>(acc / static_cast<double>(ny - y0));
    }
  }

  std::vector<float> vol(inten.size());
  const double eta = spec.noise_level;
  for (std::size_t i = 0; i < inten.size(); ++i) {
    const double n = (eta > 0.0) ? subj_rng.uniform(1.0 - eta, 1.0 + eta) : 1.0;
    vol[i] = static_cast<float>(std::clamp(inten[i] * n, 0.0, 1.0));
  }

  return Phantom{Volume(d, spec.spacing, std::move(vol)),
                 LabelVolume(d, spec.spacing, spec.n_layers + 1, std::move(labels)),
                 EnFaceImage(nx, nz, std::move(ef)), std::move(vessel_paths)};
}

}  // namespace nfa
