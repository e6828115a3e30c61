#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nfa/adam.hpp"
#include "nfa/checkpoint.hpp"
#include "nfa/nets.hpp"
#include "nfa/rng.hpp"
#include "nfa/tape.hpp"
#include "nfa/volume.hpp"

namespace nfa {

/// Min-max scale a volume into [0,1] in place; returns (lo, hi). A constant
/// volume becomes all zeros.
inline std::pair<float, float> minmax_scale_inplace(Volume& v) {
  auto [lo_it, hi_it] = std::minmax_element(v.data().begin(), v.data().end());
  const float lo = *lo_it, hi = *hi_it;
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (auto& x : v.data()) x = (x - lo) * inv;
  } else {
    for (auto& x : v.data()) x = 0.0f;
  }
  return {lo, hi};
}

/// 1 - mean windowed SSIM between two [ny,nx] images on the tape; same
/// windowing as the plain metric (7x7 uniform window, valid positions,
/// k1=0.01, k2=0.03, unit range).
template <typename S>
typename Tape<S>::Id ssim_loss_2d(Tape<S>& t, typename Tape<S>::Id a, typename Tape<S>::Id b,
                                  int window = 7) {
  const S c1 = S(1e-4), c2 = S(9e-4);
  auto mu_a = t.box_mean2d(a, window);
  auto mu_b = t.box_mean2d(b, window);
  auto xx = t.box_mean2d(t.mul(a, a), window);
  auto yy = t.box_mean2d(t.mul(b, b), window);
  auto xy = t.box_mean2d(t.mul(a, b), window);
  auto va = t.sub(xx, t.mul(mu_a, mu_a));
  auto vb = t.sub(yy, t.mul(mu_b, mu_b));
  auto cov = t.sub(xy, t.mul(mu_a, mu_b));
  auto num = t.mul(t.addc(t.mulc(t.mul(mu_a, mu_b), S(2)), c1), t.addc(t.mulc(cov, S(2)), c2));
  auto den = t.mul(t.addc(t.add(t.mul(mu_a, mu_a), t.mul(mu_b, mu_b)), c1),
                   t.addc(t.add(va, vb), c2));
  return t.addc(t.neg(t.mean_all(t.div(num, den))), S(1));
}

/// One cached B-scan: inputs and targets for a single training step.
template <typename S>
struct SliceBatch {
  std::int64_t iz = 0;
  std::int64_t ny = 0, nx = 0;
  Tensor<S> coords;    ///< [ny*nx, 3]
  Tensor<S> ef;        ///< [ny*nx, 1]
  Tensor<S> target;    ///< [ny*nx, 1]
  Tensor<S> onehot;    ///< [ny*nx, C]
};

template <typename S>
SliceBatch<S> make_slice_batch(const Volume& vol, const LabelVolume& labels,
                               const EnFaceImage& enface, int num_classes, std::int64_t iz) {
  const Dims3& d = vol.dims();
  if (!(labels.dims() == d)) throw std::invalid_argument("make_slice_batch: dims mismatch");
  if (iz < 0 || iz >= d.nz) throw std::out_of_range("make_slice_batch: slice out of range");
  const std::int64_t B = d.ny * d.nx;
  std::vector<S> coords(static_cast<std::size_t>(B) * 3);
  std::vector<S> ef(static_cast<std::size_t>(B));
  std::vector<S> target(static_cast<std::size_t>(B));
  std::vector<S> onehot(static_cast<std::size_t>(B * num_classes), S(0));
  const double cz = axis_coord(iz, d.nz);
  std::size_t r = 0;
  for (std::int64_t iy = 0; iy < d.ny; ++iy) {
    for (std::int64_t ix = 0; ix < d.nx; ++ix, ++r) {
      coords[r * 3 + 0] = static_cast<S>(axis_coord(iy, d.ny));
      coords[r * 3 + 1] = static_cast<S>(axis_coord(ix, d.nx));
      coords[r * 3 + 2] = static_cast<S>(cz);
      ef[r] = static_cast<S>(enface.at(ix, iz));
      target[r] = static_cast<S>(vol.at(iy, ix, iz));
      const std::uint8_t l = labels.at(iy, ix, iz);
      if (l >= num_classes) throw std::invalid_argument("make_slice_batch: label >= C");
      onehot[r * static_cast<std::size_t>(num_classes) + l] = S(1);
    }
  }
  SliceBatch<S> out;
  out.iz = iz;
  out.ny = d.ny;
  out.nx = d.nx;
  out.coords = Tensor<S>({B, 3}, std::move(coords));
  out.ef = Tensor<S>({B, 1}, std::move(ef));
  out.target = Tensor<S>({B, 1}, std::move(target));
  out.onehot = Tensor<S>({B, num_classes}, std::move(onehot));
  return out;
}

/// Scalar ids of the loss pieces for one B-scan; total is their weighted sum
/// on the same tape so gradients and reports come from one graph.
template <typename S>
struct InterpLossParts {
  typename Tape<S>::Id recon;  ///< 0.1*(1-SSIM) + MSE
  typename Tape<S>::Id seg;    ///< mean BCE of softmax probs vs one-hot
  typename Tape<S>::Id reg;    ///< ||p||^2
  typename Tape<S>::Id total;
};

template <typename S>
InterpLossParts<S> interp_loss(Tape<S>& t, const InterpNet<S>& net,
                               const std::vector<typename Tape<S>::Id>& param_ids,
                               typename Tape<S>::Id prior, const SliceBatch<S>& batch, S alpha,
                               S beta) {
  auto coords = t.constant(batch.coords);
  auto ef = t.constant(batch.ef);
  auto out = net.forward(t, param_ids, coords, ef, prior);
  auto mse = t.mean_all(t.square(t.sub(out.recon, t.constant(batch.target))));
  auto rec2d = t.reshape(out.recon, {batch.ny, batch.nx});
  auto tgt2d = t.reshape(t.constant(batch.target), {batch.ny, batch.nx});
  auto ssim = ssim_loss_2d(t, rec2d, tgt2d);
  InterpLossParts<S> parts;
  parts.recon = t.add(t.mulc(ssim, S(0.1)), mse);
  parts.seg = t.mean_all(t.bce(out.probs, t.constant(batch.onehot)));
  parts.reg = t.sum_all(t.square(prior));
  parts.total = t.add(t.add(parts.recon, t.mulc(parts.seg, alpha)), t.mulc(parts.reg, beta));
  return parts;
}

// ---- training -------------------------------------------------------------

struct InterpTrainConfig {
  int epochs = 1500;
  double lr0 = 1e-4;
  double lr_decay = 0.99;
  int early_stop_after = 100;  ///< earliest epoch allowed to stop
  int patience = 20;
  double min_delta = 1e-5;
  double alpha = 0.2;
  double beta = 0.2;
  std::uint64_t seed = 0;
};

struct EpochLoss {
  int epoch = 0;
  double recon = 0, seg = 0, reg = 0, total = 0;
};

inline void write_loss_history_csv(const std::string& path, const std::vector<EpochLoss>& hist) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write loss history to '" + path + "'");
  os << "epoch,recon,seg,reg,total\n";
  os.precision(10);
  for (const auto& e : hist)
    os << e.epoch << "," << e.recon << "," << e.seg << "," << e.reg << "," << e.total << "\n";
}

/// One subject's training data: per-kept-slice batches.
template <typename S>
struct InterpSubject {
  std::string name;
  std::vector<SliceBatch<S>> slices;
};

template <typename S>
InterpSubject<S> make_interp_subject(std::string name, const Volume& vol,
                                     const LabelVolume& labels, const EnFaceImage& enface,
                                     int num_classes, const std::vector<std::int64_t>& kept) {
  InterpSubject<S> s;
  s.name = std::move(name);
  for (std::int64_t iz : kept)
    s.slices.push_back(make_slice_batch<S>(vol, labels, enface, num_classes, iz));
  return s;
}

struct InterpTrainResult {
  std::vector<EpochLoss> history;
  int last_epoch = 0;
  bool early_stopped = false;
};

/// Joint training of the shared network and one latent prior per subject.
/// One optimizer step per B-scan; slice order reshuffled every epoch from the
/// config seed. Throws on non-finite loss naming the epoch and subject.
template <typename S>
InterpTrainResult interp_train(InterpNet<S>& net, std::vector<Tensor<S>>& priors,
                                  const std::vector<InterpSubject<S>>& subjects,
                                  const InterpTrainConfig& cfg,
                                  const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  if (priors.size() != subjects.size())
    throw std::invalid_argument("interp_train: one prior per subject required");
  if (subjects.empty()) throw std::invalid_argument("interp_train: no subjects");

  AdamConfig net_cfg{cfg.lr0, 0.9, 0.999, 1e-8, cfg.lr_decay};
  Adam<S> net_opt(net.params(), net_cfg, "interp-net");
  std::vector<Adam<S>> prior_opts;
  for (std::size_t i = 0; i < priors.size(); ++i)
    prior_opts.emplace_back(std::vector<Tensor<S>>{priors[i]}, net_cfg,
                            "latent[" + subjects[i].name + "]");

  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t i = 0; i < subjects.size(); ++i)
    for (std::size_t s = 0; s < subjects[i].slices.size(); ++s) order.emplace_back(i, s);

  Rng shuffle_rng(cfg.seed);
  InterpTrainResult result;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    net_opt.set_epoch(epoch);
    for (auto& po : prior_opts) po.set_epoch(epoch);

    // Fisher-Yates with the epoch-forked stream.
    Rng er = shuffle_rng.fork(static_cast<std::uint64_t>(epoch) + 1);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(er.below(i))]);

    EpochLoss el;
    el.epoch = epoch;
    for (const auto& [si, sl] : order) {
      Tape<S> t;
      std::vector<typename Tape<S>::Id> ids;
      ids.reserve(net.params().size());
      for (const auto& p : net.params()) ids.push_back(t.leaf(p));
      auto prior_id = t.leaf(priors[si]);
      auto parts = interp_loss(t, net, ids, prior_id, subjects[si].slices[sl],
                               static_cast<S>(cfg.alpha), static_cast<S>(cfg.beta));
      const double total = static_cast<double>(t.val(parts.total).item());
      if (!std::isfinite(total))
        throw std::runtime_error("interp_train: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", subject '" + subjects[si].name +
                                 "', slice " + std::to_string(subjects[si].slices[sl].iz));
      el.recon += static_cast<double>(t.val(parts.recon).item());
      el.seg += static_cast<double>(t.val(parts.seg).item());
      el.reg += static_cast<double>(t.val(parts.reg).item());
      el.total += total;

      t.backward(parts.total);
      std::vector<Tensor<S>> net_grads;
      net_grads.reserve(ids.size());
      for (auto id : ids) net_grads.push_back(t.grad(id));
      net_opt.step(net.params(), net_grads);
      std::vector<Tensor<S>> pvec{priors[si]};
      prior_opts[si].step(pvec, {t.grad(prior_id)});
      priors[si] = pvec[0];
    }
    const double n = static_cast<double>(order.size());
    el.recon /= n;
    el.seg /= n;
    el.reg /= n;
    el.total /= n;
    result.history.push_back(el);
    result.last_epoch = epoch;
    if (on_epoch) on_epoch(el);

    if (el.total < best - cfg.min_delta) {
      best = el.total;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (epoch >= cfg.early_stop_after && since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

// ---- inference on a new subject -------------------------------------------

struct InterpInferConfig {
  int epochs = 200;
  double lr0 = 1e-3;
  double lr_decay = 0.99;
  double beta = 0.2;
  std::uint64_t seed = 0;
};

template <typename S>
struct InterpInferResult {
  Tensor<S> prior;
  std::vector<EpochLoss> history;       ///< seg component is always 0 here
  std::string params_sha_before;
  std::string params_sha_after;
};

/// Test-time optimization of a fresh latent prior against the kept slices of
/// an unseen subject; the shared network is frozen (constants on the tape).
template <typename S>
InterpInferResult<S> interp_infer_latent(const InterpNet<S>& net,
                                         const InterpSubject<S>& subject,
                                         const InterpInferConfig& cfg,
                                         const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  if (subject.slices.empty()) throw std::invalid_argument("interp_infer_latent: no slices");
  InterpInferResult<S> out;
  out.params_sha_before = params_sha256(to_f32(net.params()));

  Rng rng(cfg.seed);
  Tensor<S> prior = init_latent_interp<S>(net.config().L, rng);
  AdamConfig acfg{cfg.lr0, 0.9, 0.999, 1e-8, cfg.lr_decay};
  Adam<S> opt({prior}, acfg, "latent-infer");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_epoch(epoch);
    EpochLoss el;
    el.epoch = epoch;
    for (const auto& batch : subject.slices) {
      Tape<S> t;
      std::vector<typename Tape<S>::Id> ids;
      for (const auto& p : net.params()) ids.push_back(t.constant(p));
      auto prior_id = t.leaf(prior);
      auto coords = t.constant(batch.coords);
      auto ef = t.constant(batch.ef);
      auto fwd = net.forward(t, ids, coords, ef, prior_id);
      auto mse = t.mean_all(t.square(t.sub(fwd.recon, t.constant(batch.target))));
      auto rec2d = t.reshape(fwd.recon, {batch.ny, batch.nx});
      auto tgt2d = t.reshape(t.constant(batch.target), {batch.ny, batch.nx});
      auto recon = t.add(t.mulc(ssim_loss_2d(t, rec2d, tgt2d), S(0.1)), mse);
      auto reg = t.sum_all(t.square(prior_id));
      auto total = t.add(recon, t.mulc(reg, static_cast<S>(cfg.beta)));
      const double tv = static_cast<double>(t.val(total).item());
      if (!std::isfinite(tv))
        throw std::runtime_error("interp_infer_latent: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", slice " + std::to_string(batch.iz));
      el.recon += static_cast<double>(t.val(recon).item());
      el.reg += static_cast<double>(t.val(reg).item());
      el.total += tv;
      t.backward(total);
      std::vector<Tensor<S>> pvec{prior};
      opt.step(pvec, {t.grad(prior_id)});
      prior = pvec[0];
    }
    const double n = static_cast<double>(subject.slices.size());
    el.recon /= n;
    el.reg /= n;
    el.total /= n;
    out.history.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  out.prior = prior;
  out.params_sha_after = params_sha256(to_f32(net.params()));
  return out;
}

// ---- evaluation -----------------------------------------------------------

/// Evaluate the conditioned network over an arbitrary output grid. The
/// en-face channel is sampled bilinearly in normalized coordinates, so the
/// output resolution is independent of the training grid. Segmentation takes
/// the argmax (first index wins ties).
template <typename S>
std::pair<Volume, LabelVolume> interp_evaluate(const InterpNet<S>& net, const Tensor<S>& prior,
                                               const EnFaceImage& enface, const Dims3& out_dims,
                                               const Spacing3& out_spacing) {
  const int C = static_cast<int>(net.config().C);
  Volume vol = Volume::zeros(out_dims, out_spacing);
  LabelVolume lab = LabelVolume::zeros(out_dims, out_spacing, C);
  const std::int64_t B = out_dims.ny * out_dims.nx;

  for (std::int64_t iz = 0; iz < out_dims.nz; ++iz) {
    const double cz = axis_coord(iz, out_dims.nz);
    std::vector<S> coords(static_cast<std::size_t>(B) * 3);
    std::vector<S> ef(static_cast<std::size_t>(B));
    std::size_t r = 0;
    for (std::int64_t iy = 0; iy < out_dims.ny; ++iy) {
      for (std::int64_t ix = 0; ix < out_dims.nx; ++ix, ++r) {
        const double cx = axis_coord(ix, out_dims.nx);
        coords[r * 3 + 0] = static_cast<S>(axis_coord(iy, out_dims.ny));
        coords[r * 3 + 1] = static_cast<S>(cx);
        coords[r * 3 + 2] = static_cast<S>(cz);
        ef[r] = static_cast<S>(enface.sample(cx, cz));
      }
    }
    Tape<S> t;
    std::vector<typename Tape<S>::Id> ids;
    for (const auto& p : net.params()) ids.push_back(t.constant(p));
    auto fwd = net.forward(t, ids, t.constant(Tensor<S>({B, 3}, std::move(coords))),
                           t.constant(Tensor<S>({B, 1}, std::move(ef))), t.constant(prior));
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
