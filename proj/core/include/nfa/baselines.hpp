#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nfa/adam.hpp"
#include "nfa/interp.hpp"
#include "nfa/nets.hpp"
#include "nfa/volume.hpp"

namespace nfa {

/// Linear inter-slice interpolation between the kept B-scans. Intensities are
/// blended linearly; labels are blended then rounded half away from zero.
/// Slices outside the kept range clamp to the nearest kept slice.
std::pair<Volume, LabelVolume> linear_interp_baseline(const Volume& vol, const LabelVolume& labels,
                                                      const std::vector<std::int64_t>& kept);

// ---- single-instance INR baseline -----------------------------------------

struct SingleInrConfig {
  int epochs = 400;
  double lr0 = 1e-4;
  double lr_decay = 0.99;
  double alpha = 0.2;             ///< segmentation loss weight
  bool with_ef = false;           ///< add the en-face value as a 4th input
  bool squeeze_spacing = true;    ///< compress the slow axis toward isotropy
  std::uint64_t seed = 0;
};

/// One fitted single-subject INR: a sine MLP (3 hidden layers of width 512)
/// with the same two heads as the shared model but no latent conditioning.
template <typename S>
struct SingleInrModel {
  AtlasNet<S> net;
  SingleInrConfig cfg;
  double z_squeeze = 1.0;  ///< multiplier applied to normalized z inputs
};

namespace detail {

/// Squeeze factor pretending the kept slices are spaced like the fast axis:
/// sx / (sz * stride). Capped at 1 so isotropic data is untouched.
inline double squeeze_factor(const Spacing3& sp, std::int64_t n_total, std::int64_t n_keep) {
  const double stride =
      n_keep > 1 ? static_cast<double>(n_total - 1) / static_cast<double>(n_keep - 1) : 1.0;
  const double f = sp.sx / (sp.sz * stride);
  return f < 1.0 ? f : 1.0;
}

}  // namespace detail

/// Fit a single-subject INR to the kept slices. Trains per B-scan like the
/// shared model (MSE + 0.1*(1-SSIM) + alpha*BCE) but with no latent and no
/// prior regularizer.
template <typename S>
SingleInrModel<S> single_inr_fit(const Volume& vol, const LabelVolume& labels,
                                 const EnFaceImage& enface,
                                 const std::vector<std::int64_t>& kept, int num_classes,
                                 const SingleInrConfig& cfg,
                                 const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  Rng rng(cfg.seed);
  AtlasNetConfig<S> net_cfg;
  net_cfg.C = num_classes;
  net_cfg.in_dim = cfg.with_ef ? 4 : 3;
  net_cfg.width = 512;
  net_cfg.depth = 3;
  SingleInrModel<S> model{AtlasNet<S>(net_cfg, rng), cfg, 1.0};
  if (cfg.squeeze_spacing)
    model.z_squeeze = detail::squeeze_factor(vol.spacing(), vol.dims().nz,
                                             static_cast<std::int64_t>(kept.size()));

  std::vector<SliceBatch<S>> batches;
  for (std::int64_t iz : kept)
    batches.push_back(make_slice_batch<S>(vol, labels, enface, num_classes, iz));

  auto inputs_of = [&](const SliceBatch<S>& b) {
    const std::int64_t B = b.coords.shape()[0];
    const std::int64_t in = net_cfg.in_dim;
    std::vector<S> rows(static_cast<std::size_t>(B * in));
    for (std::int64_t r = 0; r < B; ++r) {
      rows[static_cast<std::size_t>(r * in + 0)] = b.coords.at(r * 3 + 0);
      rows[static_cast<std::size_t>(r * in + 1)] = b.coords.at(r * 3 + 1);
      rows[static_cast<std::size_t>(r * in + 2)] =
          b.coords.at(r * 3 + 2) * static_cast<S>(model.z_squeeze);
      if (cfg.with_ef) rows[static_cast<std::size_t>(r * in + 3)] = b.ef.at(r);
    }
    return Tensor<S>({B, in}, std::move(rows));
  };
  std::vector<Tensor<S>> inputs;
  for (const auto& b : batches) inputs.push_back(inputs_of(b));

  AdamConfig acfg{cfg.lr0, 0.9, 0.999, 1e-8, cfg.lr_decay};
  Adam<S> opt(model.net.params(), acfg, "single-inr");
  Rng shuffle_rng(cfg.seed ^ 0x5157u);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_epoch(epoch);
    std::vector<std::size_t> order(batches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng er = shuffle_rng.fork(static_cast<std::uint64_t>(epoch) + 1);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(er.below(i))]);

    EpochLoss el;
    el.epoch = epoch;
    for (std::size_t bi : order) {
      const auto& b = batches[bi];
      Tape<S> t;
      std::vector<typename Tape<S>::Id> ids;
      for (const auto& p : model.net.params()) ids.push_back(t.leaf(p));
      auto fwd = model.net.forward(t, ids, t.constant(inputs[bi]));
      auto mse = t.mean_all(t.square(t.sub(fwd.recon, t.constant(b.target))));
      auto rec2d = t.reshape(fwd.recon, {b.ny, b.nx});
      auto tgt2d = t.reshape(t.constant(b.target), {b.ny, b.nx});
      auto recon = t.add(t.mulc(ssim_loss_2d(t, rec2d, tgt2d), S(0.1)), mse);
      auto seg = t.mean_all(t.bce(fwd.probs, t.constant(b.onehot)));
      auto total = t.add(recon, t.mulc(seg, static_cast<S>(cfg.alpha)));
      const double tv = static_cast<double>(t.val(total).item());
      if (!std::isfinite(tv))
        throw std::runtime_error("single_inr_fit: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", slice " + std::to_string(b.iz));
      el.recon += static_cast<double>(t.val(recon).item());
      el.seg += static_cast<double>(t.val(seg).item());
      el.total += tv;
      t.backward(total);
      std::vector<Tensor<S>> grads;
      for (auto id : ids) grads.push_back(t.grad(id));
      opt.step(model.net.params(), grads);
    }
    const double n = static_cast<double>(batches.size());
    el.recon /= n;
    el.seg /= n;
    el.total /= n;
    if (on_epoch) on_epoch(el);
  }
  return model;
}

/// Evaluate a fitted single-subject INR over an output grid (same contract
/// as interp_evaluate).
template <typename S>
std::pair<Volume, LabelVolume> single_inr_evaluate(const SingleInrModel<S>& model,
                                                   const EnFaceImage& enface,
                                                   const Dims3& out_dims,
                                                   const Spacing3& out_spacing) {
  const int C = static_cast<int>(model.net.config().C);
  const std::int64_t in = model.net.config().in_dim;
  Volume vol = Volume::zeros(out_dims, out_spacing);
  LabelVolume lab = LabelVolume::zeros(out_dims, out_spacing, C);
  const std::int64_t B = out_dims.ny * out_dims.nx;
  for (std::int64_t iz = 0; iz < out_dims.nz; ++iz) {
    const double cz = axis_coord(iz, out_dims.nz);
    std::vector<S> rows(static_cast<std::size_t>(B * in));
    std::size_t r = 0;
    for (std::int64_t iy = 0; iy < out_dims.ny; ++iy) {
      for (std::int64_t ix = 0; ix < out_dims.nx; ++ix, ++r) {
        const double cx = axis_coord(ix, out_dims.nx);
        rows[r * static_cast<std::size_t>(in) + 0] = static_cast<S>(axis_coord(iy, out_dims.ny));
        rows[r * static_cast<std::size_t>(in) + 1] = static_cast<S>(cx);
        rows[r * static_cast<std::size_t>(in) + 2] = static_cast<S>(cz * model.z_squeeze);
        if (in == 4) rows[r * static_cast<std::size_t>(in) + 3] = static_cast<S>(enface.sample(cx, cz));
      }
    }
    Tape<S> t;
    std::vector<typename Tape<S>::Id> ids;
    for (const auto& p : model.net.params()) ids.push_back(t.constant(p));
    auto fwd = model.net.forward(t, ids, t.constant(Tensor<S>({B, in}, std::move(rows))));
    const auto& rec = t.val(fwd.recon);
    const auto& probs = t.val(fwd.probs);
    r = 0;
    for (std::int64_t iy = 0; iy < out_dims.ny; ++iy) {
      for (std::int64_t ix = 0; ix < out_dims.nx; ++ix, ++r) {
        vol.at(iy, ix, iz) = static_cast<float>(rec.at(static_cast<std::int64_t>(r)));
        int best = 0;
        S bv = probs.at(static_cast<std::int64_t>(r) * C);
        for (int c = 1; c < C; ++c) {
          const S v = probs.at(static_cast<std::int64_t>(r) * C + c);
          if (v > bv) {
            bv = v;
            best = c;
          }
        }
        lab.at(iy, ix, iz) = static_cast<std::uint8_t>(best);
      }
    }
  }
  return {std::move(vol), std::move(lab)};
}

}  // namespace nfa
