#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nfa/rng.hpp"
#include "nfa/tape.hpp"
#include "nfa/tensor.hpp"

namespace nfa {

/// Latent prior conditioning a shared network on one subject.
template <typename S>
struct LatentPrior {
  Tensor<S> values;  ///< shape [1, L]
  std::int64_t subject_id = -1;
};

/// Interpolation-side prior: N(0, 0.01), small enough to start all subjects
/// near the shared representation.
template <typename S>
Tensor<S> init_latent_interp(std::int64_t L, Rng& rng) {
  if (L <= 0) throw std::invalid_argument("init_latent_interp: L must be positive");
  return Tensor<S>::normal({1, L}, S(0), S(0.01), rng);
}

/// Registration-side prior: first half N(1, 0.1), second half N(0, 0.1).
template <typename S>
Tensor<S> init_latent_reg(std::int64_t L, Rng& rng) {
  if (L <= 0 || L % 2 != 0)
    throw std::invalid_argument("init_latent_reg: L must be positive and even");
  std::vector<S> v(static_cast<std::size_t>(L));
  for (std::int64_t i = 0; i < L / 2; ++i) v[static_cast<std::size_t>(i)] = static_cast<S>(rng.normal(1.0, 0.1));
  for (std::int64_t i = L / 2; i < L; ++i) v[static_cast<std::size_t>(i)] = static_cast<S>(rng.normal(0.0, 0.1));
  return Tensor<S>({1, L}, std::move(v));
}

/// SIREN uniform bound: 1/fan_in for the first layer, sqrt(6/fan_in)/omega0
/// for the rest.
inline double siren_bound(std::int64_t fan_in, double omega0, bool first_layer) {
  if (fan_in < 1) throw std::invalid_argument("siren_bound: fan_in must be >= 1");
  if (first_layer) return 1.0 / static_cast<double>(fan_in);
  return std::sqrt(6.0 / static_cast<double>(fan_in)) / omega0;
}

template <typename S>
Tensor<S> siren_init(std::int64_t fan_in, std::int64_t fan_out, double omega0, bool first_layer,
                     Rng& rng) {
  const S b = static_cast<S>(siren_bound(fan_in, omega0, first_layer));
  return Tensor<S>::uniform({fan_in, fan_out}, -b, b, rng);
}

namespace detail {

template <typename S>
Tensor<S> fanin_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const S b = static_cast<S>(1.0 / std::sqrt(static_cast<double>(fan_in)));
  return Tensor<S>::uniform(std::move(shape), -b, b, rng);
}

/// Tile a [1, L] row to [B, L] via ones-matmul so gradients flow back to the
/// single row.
template <typename S>
typename Tape<S>::Id tile_rows(Tape<S>& t, typename Tape<S>::Id row, std::int64_t B) {
  return t.matmul(t.constant(Tensor<S>::full({B, 1}, S(1))), row);
}

}  // namespace detail

// ---- interpolation network ------------------------------------------------

/// Six complex Gabor-activated hidden layers of width 128 with residual
/// connections and re-injection of (coords, en-face, prior) at every hidden
/// layer; sigmoid reconstruction head and softmax segmentation head. Complex
/// values are (re, im) tensor pairs; heads read the real part.
template <typename S>
struct InterpNetConfig {
  std::int64_t L = 128;   ///< latent length
  std::int64_t C = 10;    ///< segmentation classes
  std::int64_t width = 128;
  std::int64_t depth = 6;
  S omega0 = S(20);
  S s0 = S(10);
  bool use_enface = true;  ///< ablation switch: false drops the en-face input
  std::int64_t in_dim() const { return 3 + (use_enface ? 1 : 0) + L; }
};

template <typename S>
class InterpNet {
 public:
  using Id = typename Tape<S>::Id;
  using scalar = S;

  InterpNet(InterpNetConfig<S> cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.L <= 0 || cfg.C < 2 || cfg.width < 1 || cfg.depth < 1)
      throw std::invalid_argument("InterpNet: invalid configuration");
    const std::int64_t w = cfg.width;
    for (std::int64_t k = 0; k < cfg.depth; ++k) {
      const std::int64_t in = (k == 0) ? cfg.in_dim() : w + cfg.in_dim();
      push_param("layer" + std::to_string(k) + ".Wr", detail::fanin_uniform<S>({in, w}, in, rng));
      push_param("layer" + std::to_string(k) + ".Wi", detail::fanin_uniform<S>({in, w}, in, rng));
      push_param("layer" + std::to_string(k) + ".br", detail::fanin_uniform<S>({w}, in, rng));
      push_param("layer" + std::to_string(k) + ".bi", detail::fanin_uniform<S>({w}, in, rng));
    }
    push_param("recon.W", detail::fanin_uniform<S>({w, 1}, w, rng));
    push_param("recon.b", detail::fanin_uniform<S>({1}, w, rng));
    push_param("seg.W", detail::fanin_uniform<S>({w, cfg.C}, w, rng));
    push_param("seg.b", detail::fanin_uniform<S>({cfg.C}, w, rng));
  }

  const InterpNetConfig<S>& config() const { return cfg_; }
  std::vector<Tensor<S>>& params() { return params_; }
  const std::vector<Tensor<S>>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  struct Out {
    Id recon;  ///< [B,1] in (0,1)
    Id probs;  ///< [B,C] rows summing to 1
  };

  /// Forward pass on a tape. `param_ids` must follow params() order (leaf for
  /// training, constant for frozen evaluation). `coords` [B,3], `ef` [B,1]
  /// (ignored when use_enface is false), `prior` [1,L].
  Out forward(Tape<S>& t, const std::vector<Id>& param_ids, Id coords, Id ef, Id prior) const {
    const std::int64_t B = t.val(coords).shape()[0];
    Id ptile = detail::tile_rows(t, prior, B);
    std::vector<Id> in_parts{coords};
    if (cfg_.use_enface) in_parts.push_back(ef);
    in_parts.push_back(ptile);
    Id in0 = t.concat_cols(in_parts);
    Id zero_inj = t.constant(Tensor<S>::zeros({B, cfg_.in_dim()}));

    auto W = [&](std::int64_t k, int which) { return param_ids[static_cast<std::size_t>(4 * k + which)]; };
    Id hr = -1, hi = -1;
    for (std::int64_t k = 0; k < cfg_.depth; ++k) {
      Id zr, zi;
      if (k == 0) {
        // Real input: (Wr + iWi) x = Wr x + i Wi x.
        zr = t.add(t.matmul(in0, W(k, 0)), W(k, 2));
        zi = t.add(t.matmul(in0, W(k, 1)), W(k, 3));
      } else {
        Id ar = t.concat_cols({hr, in0});
        Id ai = t.concat_cols({hi, zero_inj});
        zr = t.add(t.sub(t.matmul(ar, W(k, 0)), t.matmul(ai, W(k, 1))), W(k, 2));
        zi = t.add(t.add(t.matmul(ar, W(k, 1)), t.matmul(ai, W(k, 0))), W(k, 3));
      }
      auto [gr, gi] = t.gabor(zr, zi, cfg_.omega0, cfg_.s0);
      if (k == 0) {
        hr = gr;
        hi = gi;
      } else {
        hr = t.add(gr, hr);
        hi = t.add(gi, hi);
      }
    }
    const std::size_t base = static_cast<std::size_t>(4 * cfg_.depth);
    Id recon = t.sigmoid(t.add(t.matmul(hr, param_ids[base]), param_ids[base + 1]));
    Id probs = t.softmax_rows(t.add(t.matmul(hr, param_ids[base + 2]), param_ids[base + 3]));
    return {recon, probs};
  }

 private:
  void push_param(std::string name, Tensor<S> v) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(v));
  }

  InterpNetConfig<S> cfg_;
  std::vector<Tensor<S>> params_;
  std::vector<std::string> names_;
};

// ---- atlas network --------------------------------------------------------

/// Four sine-activated hidden layers of width 256 over a 3D coordinate, with
/// sigmoid reconstruction and softmax segmentation heads. `in_dim` covers
/// coordinate-only (3) and coordinate-plus-channel variants.
template <typename S>
struct AtlasNetConfig {
  std::int64_t C = 10;
  std::int64_t in_dim = 3;
  std::int64_t width = 256;
  std::int64_t depth = 4;
  S omega0 = S(30);
};

template <typename S>
class AtlasNet {
 public:
  using Id = typename Tape<S>::Id;
  using scalar = S;

  AtlasNet(AtlasNetConfig<S> cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.C < 2 || cfg.in_dim < 1 || cfg.width < 1 || cfg.depth < 1)
      throw std::invalid_argument("AtlasNet: invalid configuration");
    const std::int64_t w = cfg.width;
    for (std::int64_t k = 0; k < cfg.depth; ++k) {
      const std::int64_t in = (k == 0) ? cfg.in_dim : w;
      push_param("layer" + std::to_string(k) + ".W",
                 siren_init<S>(in, w, static_cast<double>(cfg.omega0), k == 0, rng));
      push_param("layer" + std::to_string(k) + ".b", detail::fanin_uniform<S>({w}, in, rng));
    }
    push_param("recon.W", siren_init<S>(w, 1, static_cast<double>(cfg.omega0), false, rng));
    push_param("recon.b", detail::fanin_uniform<S>({1}, w, rng));
    push_param("seg.W", siren_init<S>(w, cfg.C, static_cast<double>(cfg.omega0), false, rng));
    push_param("seg.b", detail::fanin_uniform<S>({cfg.C}, w, rng));
  }

  const AtlasNetConfig<S>& config() const { return cfg_; }
  std::vector<Tensor<S>>& params() { return params_; }
  const std::vector<Tensor<S>>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  struct Out {
    Id recon;
    Id probs;
  };

  Out forward(Tape<S>& t, const std::vector<Id>& param_ids, Id coords) const {
    Id h = coords;
    for (std::int64_t k = 0; k < cfg_.depth; ++k) {
      const std::size_t base = static_cast<std::size_t>(2 * k);
      h = t.sin(t.mulc(t.add(t.matmul(h, param_ids[base]), param_ids[base + 1]), cfg_.omega0));
    }
    const std::size_t base = static_cast<std::size_t>(2 * cfg_.depth);
    Id recon = t.sigmoid(t.add(t.matmul(h, param_ids[base]), param_ids[base + 1]));
    Id probs = t.softmax_rows(t.add(t.matmul(h, param_ids[base + 2]), param_ids[base + 3]));
    return {recon, probs};
  }

 private:
  void push_param(std::string name, Tensor<S> v) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(v));
  }

  AtlasNetConfig<S> cfg_;
  std::vector<Tensor<S>> params_;
  std::vector<std::string> names_;
};

// ---- displacement network with hypernetwork modulation --------------------

/// Sine MLP [3 -> H, H -> H x3, H -> 3]; the three hidden-to-hidden layers
/// are modulated as sin(omega0 * (phi .* (Wx+b) + psi)) with per-layer
/// (phi, psi) = W_hyper p + b_hyper. The final layer keeps a plain sine
/// (no omega0) scaled by max_disp so a freshly initialized net emits small
/// displacements.
template <typename S>
struct DisplacementNetConfig {
  std::int64_t L = 128;
  std::int64_t width = 128;
  S omega0 = S(30);
  S max_disp = S(0.2);      ///< normalized-coordinate displacement bound
  S weight_init = S(0.001); ///< U(-w, w) on every displacement weight
};

template <typename S>
class DisplacementNet {
 public:
  using Id = typename Tape<S>::Id;
  using scalar = S;
  static constexpr std::int64_t kModulated = 3;

  DisplacementNet(DisplacementNetConfig<S> cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.L <= 0 || cfg.L % 2 != 0 || cfg.width < 1)
      throw std::invalid_argument("DisplacementNet: invalid configuration");
    const std::int64_t w = cfg.width;
    const S wi = cfg.weight_init;
    push_param("layer0.W", Tensor<S>::uniform({3, w}, -wi, wi, rng));
    push_param("layer0.b", Tensor<S>::zeros({w}));
    for (std::int64_t k = 1; k <= kModulated; ++k) {
      push_param("layer" + std::to_string(k) + ".W", Tensor<S>::uniform({w, w}, -wi, wi, rng));
      push_param("layer" + std::to_string(k) + ".b", Tensor<S>::zeros({w}));
    }
    push_param("out.W", Tensor<S>::uniform({w, 3}, -wi, wi, rng));
    push_param("out.b", Tensor<S>::zeros({3}));
    // Hypernetwork: identity modulation at a fresh prior's expectation
    // (bias phi=1, psi=0) with a responsive linear map on top.
    const S hb = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.L)));
    for (std::int64_t k = 1; k <= kModulated; ++k) {
      push_param("hyper" + std::to_string(k) + ".W",
                 Tensor<S>::uniform({cfg.L, 2 * w}, -hb, hb, rng));
      std::vector<S> b(static_cast<std::size_t>(2 * w), S(0));
      for (std::int64_t i = 0; i < w; ++i) b[static_cast<std::size_t>(i)] = S(1);
      push_param("hyper" + std::to_string(k) + ".b", Tensor<S>({2 * w}, std::move(b)));
    }
  }

  const DisplacementNetConfig<S>& config() const { return cfg_; }
  std::vector<Tensor<S>>& params() { return params_; }
  const std::vector<Tensor<S>>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  /// Number of leading params belonging to the displacement MLP itself; the
  /// remainder is the hypernetwork.
  std::size_t mlp_param_count() const { return static_cast<std::size_t>(2 * (kModulated + 2)); }

  /// Modulated forward: `prior` [1,L], `coords` [B,3] -> u [B,3].
  Id forward(Tape<S>& t, const std::vector<Id>& param_ids, Id coords, Id prior) const {
    const std::int64_t B = t.val(coords).shape()[0];
    const std::int64_t w = cfg_.width;
    Id ptile = detail::tile_rows(t, prior, B);
    Id h = t.sin(t.mulc(t.add(t.matmul(coords, param_ids[0]), param_ids[1]), cfg_.omega0));
    for (std::int64_t k = 1; k <= kModulated; ++k) {
      const std::size_t pb = static_cast<std::size_t>(2 * k);
      const std::size_t hb = mlp_param_count() + static_cast<std::size_t>(2 * (k - 1));
      Id pre = t.add(t.matmul(h, param_ids[pb]), param_ids[pb + 1]);
      Id hyp = t.add(t.matmul(ptile, param_ids[hb]), param_ids[hb + 1]);
      Id phi = t.slice_cols(hyp, 0, w);
      Id psi = t.slice_cols(hyp, w, w);
      h = t.sin(t.mulc(t.add(t.mul(phi, pre), psi), cfg_.omega0));
    }
    const std::size_t ob = static_cast<std::size_t>(2 * (kModulated + 1));
    return t.mulc(t.sin(t.add(t.matmul(h, param_ids[ob]), param_ids[ob + 1])), cfg_.max_disp);
  }

  /// Unmodulated forward (classic INR): no hypernetwork, no prior.
  Id forward_plain(Tape<S>& t, const std::vector<Id>& param_ids, Id coords) const {
    Id h = t.sin(t.mulc(t.add(t.matmul(coords, param_ids[0]), param_ids[1]), cfg_.omega0));
    for (std::int64_t k = 1; k <= kModulated; ++k) {
      const std::size_t pb = static_cast<std::size_t>(2 * k);
      h = t.sin(t.mulc(t.add(t.matmul(h, param_ids[pb]), param_ids[pb + 1]), cfg_.omega0));
    }
    const std::size_t ob = static_cast<std::size_t>(2 * (kModulated + 1));
    return t.mulc(t.sin(t.add(t.matmul(h, param_ids[ob]), param_ids[ob + 1])), cfg_.max_disp);
  }

 private:
  void push_param(std::string name, Tensor<S> v) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(v));
  }

  DisplacementNetConfig<S> cfg_;
  std::vector<Tensor<S>> params_;
  std::vector<std::string> names_;
};

/// One modulated layer on its own: sigma(phi .* (Wx+b) + psi) where sigma is
/// sin(omega0 * .). Exposed for the identity property (phi=1, psi=0 equals
/// the plain layer bitwise) and layer-level gradient checks.
template <typename S>
typename Tape<S>::Id modulated_layer(Tape<S>& t, typename Tape<S>::Id x,
                                     typename Tape<S>::Id W, typename Tape<S>::Id b,
                                     typename Tape<S>::Id phi, typename Tape<S>::Id psi,
                                     S omega0) {
  return t.sin(t.mulc(t.add(t.mul(phi, t.add(t.matmul(x, W), b)), psi), omega0));
}

template <typename S>
typename Tape<S>::Id plain_layer(Tape<S>& t, typename Tape<S>::Id x, typename Tape<S>::Id W,
                                 typename Tape<S>::Id b, S omega0) {
  return t.sin(t.mulc(t.add(t.matmul(x, W), b), omega0));
}

}  // namespace nfa
