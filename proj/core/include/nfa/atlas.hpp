#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nfa/adam.hpp"
#include "nfa/checkpoint.hpp"
#include "nfa/interp.hpp"
#include "nfa/metrics.hpp"
#include "nfa/nets.hpp"
#include "nfa/rng.hpp"
#include "nfa/tape.hpp"
#include "nfa/volume.hpp"

namespace nfa {

struct RegLossWeights {
  double alpha = 1.0;  ///< segmentation BCE weight
  double beta = 0.01;  ///< displacement L1 weight during joint training
  double gamma = 0.01; ///< displacement L1 weight during latent inference
};

struct RegTrainConfig {
  int iters = 2000;
  double lr_displacement = 1e-5;
  double lr_atlas = 1e-6;
  double lr_latent = 1e-5;
  double lr_mult = 0.999;  ///< per-iteration decay, shared by all groups
  std::int64_t coords_per_subject = 16384;
  int pretrain_epochs = 500;
  double pretrain_lr = 5e-4;
  std::uint64_t seed = 0;
};

struct RegInferConfig {
  int epochs = 100;
  double lr0 = 5e-4;
  double lr_mult = 0.999;
  std::int64_t coords_per_subject = 16384;
  std::uint64_t seed = 0;
};

struct RegSubject {
  std::string name;
  Volume volume;
  LabelVolume labels;
};

// ---- dataset summaries -----------------------------------------------------

/// Per-voxel median across subjects (even counts average the middle pair).
inline Volume median_volume(const std::vector<RegSubject>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("median_volume: empty dataset");
  const Dims3 d = dataset.front().volume.dims();
  for (const auto& s : dataset)
    if (!(s.volume.dims() == d)) throw std::invalid_argument("median_volume: dims mismatch");
  Volume out = Volume::zeros(d, dataset.front().volume.spacing());
  const std::size_t n = out.data().size();
  std::vector<float> col(dataset.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < dataset.size(); ++s) col[s] = dataset[s].volume.data()[i];
    const std::size_t mid = col.size() / 2;
    std::nth_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(mid), col.end());
    float m = col[mid];
    if (col.size() % 2 == 0) {
      const float lo = *std::max_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(mid));
      m = 0.5f * (lo + m);
    }
    out.data()[i] = m;
  }
  return out;
}

/// Per-voxel majority label across subjects; ties resolve to the smallest
/// label, the categorical analog of the intensity median.
inline LabelVolume modal_labels(const std::vector<RegSubject>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("modal_labels: empty dataset");
  const Dims3 d = dataset.front().labels.dims();
  const int C = dataset.front().labels.num_classes();
  for (const auto& s : dataset)
    if (!(s.labels.dims() == d) || s.labels.num_classes() != C)
      throw std::invalid_argument("modal_labels: dims or class count mismatch");
  LabelVolume out = LabelVolume::zeros(d, dataset.front().labels.spacing(), C);
  const std::size_t n = out.labels().size();
  std::vector<int> count(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(count.begin(), count.end(), 0);
    for (const auto& s : dataset) ++count[s.labels.labels()[i]];
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (count[static_cast<std::size_t>(c)] > count[static_cast<std::size_t>(best)]) best = c;
    out.labels()[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---- strided coordinate sampling -------------------------------------------

/// Equidistant downsampling pattern: per-axis stride and sample count chosen
/// so the sampled sub-volume stays at or below the coordinate target. The
/// random shift range per axis covers every placement of that sub-volume.
struct StridedPlan {
  std::array<std::int64_t, 3> stride{1, 1, 1};
  std::array<std::int64_t, 3> count{0, 0, 0};
  std::array<std::int64_t, 3> max_phase{0, 0, 0};
  std::int64_t total() const { return count[0] * count[1] * count[2]; }
};

inline StridedPlan strided_plan(const Dims3& dims, std::int64_t target_coords) {
  if (target_coords < 1) throw std::invalid_argument("strided_plan: target must be positive");
  const std::array<std::int64_t, 3> n{dims.ny, dims.nx, dims.nz};
  StridedPlan p;
  auto extent = [&](int ax) { return (n[ax] + p.stride[ax] - 1) / p.stride[ax]; };
  while (extent(0) * extent(1) * extent(2) > target_coords) {
    int widest = 0;
    for (int ax = 1; ax < 3; ++ax)
      if (extent(ax) > extent(widest)) widest = ax;
    if (extent(widest) == 1) break;
    ++p.stride[widest];
  }
  for (int ax = 0; ax < 3; ++ax) {
    p.count[ax] = extent(ax);
    p.max_phase[ax] = n[ax] - 1 - (p.count[ax] - 1) * p.stride[ax];
  }
  return p;
}

inline std::array<std::int64_t, 3> random_phases(const StridedPlan& plan, Rng& rng) {
  std::array<std::int64_t, 3> ph;
  for (int ax = 0; ax < 3; ++ax)
    ph[ax] = plan.max_phase[ax] > 0
                 ? static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(plan.max_phase[ax] + 1)))
                 : 0;
  return ph;
}

/// Coordinates plus targets for one strided pass over a subject. `onehot` is
/// empty when labels are not supplied (intensity-only inference).
template <typename S>
struct CoordBatch {
  Tensor<S> coords;  ///< [B,3] normalized
  Tensor<S> target;  ///< [B,1]
  Tensor<S> onehot;  ///< [B,C] or empty
};

template <typename S>
CoordBatch<S> make_coord_batch(const Volume& vol, const LabelVolume* labels,
                               const StridedPlan& plan, const std::array<std::int64_t, 3>& phase) {
  const Dims3& d = vol.dims();
  for (int ax = 0; ax < 3; ++ax)
    if (phase[ax] < 0 || phase[ax] > plan.max_phase[ax])
      throw std::out_of_range("make_coord_batch: phase outside shift range");
  if (labels && !(labels->dims() == d))
    throw std::invalid_argument("make_coord_batch: label dims mismatch");
  const std::int64_t B = plan.total();
  const int C = labels ? labels->num_classes() : 0;
  std::vector<S> coords(static_cast<std::size_t>(B) * 3);
  std::vector<S> target(static_cast<std::size_t>(B));
  std::vector<S> onehot(labels ? static_cast<std::size_t>(B) * static_cast<std::size_t>(C) : 0,
                        S(0));
  std::size_t r = 0;
  for (std::int64_t jy = 0; jy < plan.count[0]; ++jy) {
    const std::int64_t iy = phase[0] + jy * plan.stride[0];
    for (std::int64_t jx = 0; jx < plan.count[1]; ++jx) {
      const std::int64_t ix = phase[1] + jx * plan.stride[1];
      for (std::int64_t jz = 0; jz < plan.count[2]; ++jz, ++r) {
        const std::int64_t iz = phase[2] + jz * plan.stride[2];
        coords[r * 3 + 0] = static_cast<S>(axis_coord(iy, d.ny));
        coords[r * 3 + 1] = static_cast<S>(axis_coord(ix, d.nx));
        coords[r * 3 + 2] = static_cast<S>(axis_coord(iz, d.nz));
        target[r] = static_cast<S>(vol.at(iy, ix, iz));
        if (labels)
          onehot[r * static_cast<std::size_t>(C) + labels->at(iy, ix, iz)] = S(1);
      }
    }
  }
  CoordBatch<S> out;
  out.coords = Tensor<S>({B, 3}, std::move(coords));
  out.target = Tensor<S>({B, 1}, std::move(target));
  if (labels) out.onehot = Tensor<S>({B, C}, std::move(onehot));
  return out;
}

// ---- deformation field ------------------------------------------------------

/// Subject-specific deformation: warp(c) = u(c) + c. Backed either by a
/// displacement net conditioned on a latent prior, or by a constant
/// displacement (zero = identity).
template <typename S>
class DeformationField {
 public:
  DeformationField() = default;

  DeformationField(const DisplacementNet<S>& net, Tensor<S> prior)
      : net_(&net), prior_(std::move(prior)) {
    if (prior_.shape() != std::vector<std::int64_t>{1, net.config().L})
      throw std::invalid_argument("DeformationField: prior shape mismatch");
  }

  static DeformationField translation(const std::array<S, 3>& delta) {
    DeformationField f;
    f.const_u_ = delta;
    return f;
  }

  /// warp(c) = c A + b with A [3,3] in row-vector convention.
  static DeformationField affine(const Tensor<S>& A, const std::array<S, 3>& b) {
    if (A.shape() != std::vector<std::int64_t>{3, 3})
      throw std::invalid_argument("DeformationField::affine: A must be [3,3]");
    DeformationField f;
    f.linear_ = true;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        f.lin_[static_cast<std::size_t>(i * 3 + j)] =
            A.at(i * 3 + j) - (i == j ? S(1) : S(0));
    f.const_u_ = b;
    return f;
  }

  bool is_identity() const {
    if (net_ || linear_) return false;
    return const_u_[0] == S(0) && const_u_[1] == S(0) && const_u_[2] == S(0);
  }

  /// u at each row of `coords` [B,3].
  Tensor<S> displacement(const Tensor<S>& coords) const {
    if (coords.shape().size() != 2 || coords.shape()[1] != 3)
      throw std::invalid_argument("DeformationField: coords must be [B,3]");
    if (!net_) {
      const std::int64_t B = coords.shape()[0];
      std::vector<S> u(static_cast<std::size_t>(B) * 3);
      for (std::int64_t r = 0; r < B; ++r)
        for (int ax = 0; ax < 3; ++ax) {
          S v = const_u_[ax];
          if (linear_)
            for (int k = 0; k < 3; ++k)
              v += coords.at(r * 3 + k) * lin_[static_cast<std::size_t>(k * 3 + ax)];
          u[static_cast<std::size_t>(r * 3 + ax)] = v;
        }
      return Tensor<S>({B, 3}, std::move(u));
    }
    Tape<S> t;
    std::vector<typename Tape<S>::Id> ids;
    for (const auto& p : net_->params()) ids.push_back(t.constant(p));
    auto u = net_->forward(t, ids, t.constant(coords), t.constant(prior_));
    return t.val(u);
  }

  /// u(c) + c with one rounded add per component.
  Tensor<S> warp(const Tensor<S>& coords) const {
    Tensor<S> u = displacement(coords);
    std::vector<S> w(u.data(), u.data() + u.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += coords.data()[i];
    return Tensor<S>(coords.shape(), std::move(w));
  }

  /// Adapter for jacobian_stats: flat (cy,cx,cz) doubles in, displacements out.
  DispFieldFn field_fn() const {
    DeformationField self = *this;
    return [self](const std::vector<double>& flat) {
      const std::int64_t B = static_cast<std::int64_t>(flat.size() / 3);
      std::vector<S> cs(flat.size());
      for (std::size_t i = 0; i < flat.size(); ++i) cs[i] = static_cast<S>(flat[i]);
      Tensor<S> u = self.displacement(Tensor<S>({B, 3}, std::move(cs)));
      return std::vector<double>(u.data(), u.data() + u.numel());
    };
  }

 private:
  const DisplacementNet<S>* net_ = nullptr;
  Tensor<S> prior_;
  bool linear_ = false;
  std::array<S, 9> lin_{};  ///< A - I, row-vector convention
  std::array<S, 3> const_u_{S(0), S(0), S(0)};
};

// ---- explicit parameter-image atlas ----------------------------------------

/// Ablation stand-in for the implicit atlas: one intensity image and one
/// label-logit image, sampled trilinearly at warped coordinates. Both grids
/// are trainable through the sampler.
struct ExplicitAtlasConfig {
  double init_logit = 4.0;            ///< logit assigned to the initial label
  std::int64_t max_voxels = std::int64_t(1) << 22;
};

template <typename S>
class ExplicitAtlas {
 public:
  using Id = typename Tape<S>::Id;
  using scalar = S;

  ExplicitAtlas(const Volume& intensity, const LabelVolume& labels,
                ExplicitAtlasConfig cfg = {})
      : dims_(intensity.dims()), C_(labels.num_classes()) {
    if (!(labels.dims() == dims_))
      throw std::invalid_argument("ExplicitAtlas: intensity/label dims mismatch");
    const std::int64_t vox = dims_.ny * dims_.nx * dims_.nz;
    if (vox > cfg.max_voxels)
      throw std::invalid_argument("ExplicitAtlas: " + std::to_string(vox) +
                                  " voxels exceed the budget of " +
                                  std::to_string(cfg.max_voxels));
    if (dims_.ny < 2 || dims_.nx < 2 || dims_.nz < 2)
      throw std::invalid_argument("ExplicitAtlas: extents must be >= 2 for trilinear sampling");
    std::vector<S> inten(intensity.data().begin(), intensity.data().end());
    std::vector<S> logit(static_cast<std::size_t>(vox) * static_cast<std::size_t>(C_), S(0));
    for (std::int64_t i = 0; i < vox; ++i)
      logit[static_cast<std::size_t>(i) * static_cast<std::size_t>(C_) +
            labels.labels()[static_cast<std::size_t>(i)]] = static_cast<S>(cfg.init_logit);
    names_ = {"atlas.intensity", "atlas.logits"};
    params_.push_back(Tensor<S>({dims_.ny, dims_.nx, dims_.nz, 1}, std::move(inten)));
    params_.push_back(Tensor<S>({dims_.ny, dims_.nx, dims_.nz, C_}, std::move(logit)));
  }

  const Dims3& dims() const { return dims_; }
  int num_classes() const { return static_cast<int>(C_); }
  std::vector<Tensor<S>>& params() { return params_; }
  const std::vector<Tensor<S>>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  struct Out {
    Id recon;
    Id probs;
  };

  Out forward(Tape<S>& t, const std::vector<Id>& param_ids, Id coords) const {
    Id recon = t.grid_sample3d(param_ids[0], coords);
    Id probs = t.softmax_rows(t.grid_sample3d(param_ids[1], coords));
    return {recon, probs};
  }

 private:
  Dims3 dims_;
  std::int64_t C_;
  std::vector<Tensor<S>> params_;
  std::vector<std::string> names_;
};

template <typename S>
int atlas_num_classes(const AtlasNet<S>& net) {
  return static_cast<int>(net.config().C);
}

template <typename S>
int atlas_num_classes(const ExplicitAtlas<S>& atlas) {
  return atlas.num_classes();
}

// ---- pretraining ------------------------------------------------------------

/// Fit the atlas model to the per-voxel median intensity and majority label.
/// One optimizer step per epoch on a randomly shifted strided batch.
template <typename AtlasModel>
std::vector<EpochLoss> atlas_pretrain(AtlasModel& atlas, const std::vector<RegSubject>& dataset,
                                      const RegTrainConfig& cfg, const RegLossWeights& w,
                                      const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  using S = typename AtlasModel::scalar;
  if (dataset.empty()) throw std::invalid_argument("atlas_pretrain: empty dataset");
  const Volume med = median_volume(dataset);
  const LabelVolume mode = modal_labels(dataset);
  const StridedPlan plan = strided_plan(med.dims(), cfg.coords_per_subject);
  Rng rng = Rng(cfg.seed).fork(101);

  AdamConfig acfg{cfg.pretrain_lr, 0.9, 0.999, 1e-8, cfg.lr_mult};
  Adam<S> opt(atlas.params(), acfg, "atlas-pretrain");
  std::vector<EpochLoss> history;

  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    opt.set_epoch(epoch);
    auto batch = make_coord_batch<S>(med, &mode, plan, random_phases(plan, rng));
    Tape<S> t;
    std::vector<typename Tape<S>::Id> ids;
    for (const auto& p : atlas.params()) ids.push_back(t.leaf(p));
    auto fwd = atlas.forward(t, ids, t.constant(batch.coords));
    auto mse = t.mean_all(t.square(t.sub(fwd.recon, t.constant(batch.target))));
    auto seg = t.mean_all(t.bce(fwd.probs, t.constant(batch.onehot)));
    auto total = t.add(mse, t.mulc(seg, static_cast<S>(w.alpha)));

    EpochLoss el;
    el.epoch = epoch;
    el.recon = static_cast<double>(t.val(mse).item());
    el.seg = static_cast<double>(t.val(seg).item());
    el.total = static_cast<double>(t.val(total).item());
    if (!std::isfinite(el.total))
      throw std::runtime_error("atlas_pretrain: non-finite loss at epoch " +
                               std::to_string(epoch));
    history.push_back(el);
    if (on_epoch) on_epoch(el);

    t.backward(total);
    std::vector<Tensor<S>> grads;
    grads.reserve(ids.size());
    for (auto id : ids) grads.push_back(t.grad(id));
    opt.step(atlas.params(), grads);
  }
  return history;
}

// ---- joint training ---------------------------------------------------------

struct RegIterLoss {
  int iter = 0;
  int subject = 0;
  double recon = 0, seg = 0, reg = 0, total = 0;
};

inline void write_reg_history_csv(const std::string& path,
                                  const std::vector<RegIterLoss>& hist) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write loss history to '" + path + "'");
  os << "iter,subject,recon,seg,reg,total\n";
  os.precision(10);
  for (const auto& e : hist)
    os << e.iter << "," << e.subject << "," << e.recon << "," << e.seg << "," << e.reg << ","
       << e.total << "\n";
}

struct RegTrainResult {
  std::vector<RegIterLoss> history;
};

/// Joint optimization of the atlas, the displacement net plus hypernetwork,
/// and one latent prior per subject; one subject per iteration, round-robin,
/// each parameter group under its own learning rate, all decayed per
/// iteration. Loss per coordinate: MSE + alpha*BCE + beta*||u||_1.
template <typename S, typename AtlasModel>
RegTrainResult joint_train(AtlasModel& atlas, DisplacementNet<S>& disp,
                           std::vector<Tensor<S>>& priors,
                           const std::vector<RegSubject>& dataset, const RegTrainConfig& cfg,
                           const RegLossWeights& w,
                           const std::function<void(const RegIterLoss&)>& on_iter = {}) {
  if (dataset.empty()) throw std::invalid_argument("joint_train: empty dataset");
  if (priors.size() != dataset.size())
    throw std::invalid_argument("joint_train: one prior per subject required");
  const Dims3 d = dataset.front().volume.dims();
  const int C = dataset.front().labels.num_classes();
  if (atlas_num_classes(atlas) != C)
    throw std::invalid_argument("joint_train: atlas classes != dataset classes");
  for (const auto& s : dataset)
    if (!(s.volume.dims() == d) || !(s.labels.dims() == d) || s.labels.num_classes() != C)
      throw std::invalid_argument("joint_train: subjects must share grid and classes");

  const StridedPlan plan = strided_plan(d, cfg.coords_per_subject);
  const S inv_b = static_cast<S>(1.0 / static_cast<double>(plan.total()));
  Rng rng = Rng(cfg.seed).fork(202);

  Adam<S> disp_opt(disp.params(), AdamConfig{cfg.lr_displacement, 0.9, 0.999, 1e-8, cfg.lr_mult},
                   "displacement");
  Adam<S> atlas_opt(atlas.params(), AdamConfig{cfg.lr_atlas, 0.9, 0.999, 1e-8, cfg.lr_mult},
                    "atlas");
  std::vector<Adam<S>> prior_opts;
  for (std::size_t i = 0; i < priors.size(); ++i)
    prior_opts.emplace_back(std::vector<Tensor<S>>{priors[i]},
                            AdamConfig{cfg.lr_latent, 0.9, 0.999, 1e-8, cfg.lr_mult},
                            "latent[" + dataset[i].name + "]");

  RegTrainResult result;
  for (int iter = 0; iter < cfg.iters; ++iter) {
    disp_opt.set_epoch(iter);
    atlas_opt.set_epoch(iter);
    for (auto& po : prior_opts) po.set_epoch(iter);

    const std::size_t si = static_cast<std::size_t>(iter) % dataset.size();
    auto batch =
        make_coord_batch<S>(dataset[si].volume, &dataset[si].labels, plan, random_phases(plan, rng));

    Tape<S> t;
    std::vector<typename Tape<S>::Id> disp_ids, atlas_ids;
    for (const auto& p : disp.params()) disp_ids.push_back(t.leaf(p));
    for (const auto& p : atlas.params()) atlas_ids.push_back(t.leaf(p));
    auto prior_id = t.leaf(priors[si]);

    auto coords = t.constant(batch.coords);
    auto u = disp.forward(t, disp_ids, coords, prior_id);
    auto warped = t.add(u, coords);
    auto fwd = atlas.forward(t, atlas_ids, warped);
    auto mse = t.mean_all(t.square(t.sub(fwd.recon, t.constant(batch.target))));
    auto seg = t.mean_all(t.bce(fwd.probs, t.constant(batch.onehot)));
    auto reg = t.mulc(t.sum_all(t.abs(u)), inv_b);
    auto total = t.add(t.add(mse, t.mulc(seg, static_cast<S>(w.alpha))),
                       t.mulc(reg, static_cast<S>(w.beta)));

    RegIterLoss il;
    il.iter = iter;
    il.subject = static_cast<int>(si);
    il.recon = static_cast<double>(t.val(mse).item());
    il.seg = static_cast<double>(t.val(seg).item());
    il.reg = static_cast<double>(t.val(reg).item());
    il.total = static_cast<double>(t.val(total).item());
    if (!std::isfinite(il.total))
      throw std::runtime_error("joint_train: non-finite loss at iteration " +
                               std::to_string(iter) + ", subject '" + dataset[si].name + "'");
    result.history.push_back(il);
    if (on_iter) on_iter(il);

    t.backward(total);
    std::vector<Tensor<S>> dg, ag;
    dg.reserve(disp_ids.size());
    ag.reserve(atlas_ids.size());
    for (auto id : disp_ids) dg.push_back(t.grad(id));
    for (auto id : atlas_ids) ag.push_back(t.grad(id));
    disp_opt.step(disp.params(), dg);
    atlas_opt.step(atlas.params(), ag);
    std::vector<Tensor<S>> pvec{priors[si]};
    prior_opts[si].step(pvec, {t.grad(prior_id)});
    priors[si] = pvec[0];
  }
  return result;
}

// ---- latent-only inference --------------------------------------------------

template <typename S>
struct RegInferResult {
  Tensor<S> prior;
  std::vector<EpochLoss> history;  ///< seg component is always 0
  std::string atlas_sha_before, atlas_sha_after;
  std::string disp_sha_before, disp_sha_after;
};

/// Register an unseen subject by optimizing a fresh latent prior under
/// MSE + gamma*||u||_1; atlas and displacement parameters stay frozen.
template <typename S, typename AtlasModel>
RegInferResult<S> reg_infer_latent(const AtlasModel& atlas, const DisplacementNet<S>& disp,
                                   const Volume& volume, const RegInferConfig& cfg,
                                   const RegLossWeights& w,
                                   const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  RegInferResult<S> out;
  out.atlas_sha_before = params_sha256(to_f32(atlas.params()));
  out.disp_sha_before = params_sha256(to_f32(disp.params()));

  const StridedPlan plan = strided_plan(volume.dims(), cfg.coords_per_subject);
  const S inv_b = static_cast<S>(1.0 / static_cast<double>(plan.total()));
  Rng phase_rng = Rng(cfg.seed).fork(303);
  Rng init_rng = Rng(cfg.seed).fork(304);
  Tensor<S> prior = init_latent_reg<S>(disp.config().L, init_rng);

  Adam<S> opt({prior}, AdamConfig{cfg.lr0, 0.9, 0.999, 1e-8, cfg.lr_mult}, "latent-reg-infer");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_epoch(epoch);
    auto batch = make_coord_batch<S>(volume, nullptr, plan, random_phases(plan, phase_rng));

    Tape<S> t;
    std::vector<typename Tape<S>::Id> disp_ids, atlas_ids;
    for (const auto& p : disp.params()) disp_ids.push_back(t.constant(p));
    for (const auto& p : atlas.params()) atlas_ids.push_back(t.constant(p));
    auto prior_id = t.leaf(prior);

    auto coords = t.constant(batch.coords);
    auto u = disp.forward(t, disp_ids, coords, prior_id);
    auto warped = t.add(u, coords);
    auto fwd = atlas.forward(t, atlas_ids, warped);
    auto mse = t.mean_all(t.square(t.sub(fwd.recon, t.constant(batch.target))));
    auto reg = t.mulc(t.sum_all(t.abs(u)), inv_b);
    auto total = t.add(mse, t.mulc(reg, static_cast<S>(w.gamma)));

    EpochLoss el;
    el.epoch = epoch;
    el.recon = static_cast<double>(t.val(mse).item());
    el.reg = static_cast<double>(t.val(reg).item());
    el.total = static_cast<double>(t.val(total).item());
    if (!std::isfinite(el.total))
      throw std::runtime_error("reg_infer_latent: non-finite loss at epoch " +
                               std::to_string(epoch));
    out.history.push_back(el);
    if (on_epoch) on_epoch(el);

    t.backward(total);
    std::vector<Tensor<S>> pvec{prior};
    opt.step(pvec, {t.grad(prior_id)});
    prior = pvec[0];
  }

  out.prior = prior;
  out.atlas_sha_after = params_sha256(to_f32(atlas.params()));
  out.disp_sha_after = params_sha256(to_f32(disp.params()));
  return out;
}

// ---- affine baseline --------------------------------------------------------

struct AffineFitConfig {
  int iters = 500;
  double lr0 = 1e-3;
  double lr_mult = 0.999;
  std::int64_t coords_per_subject = 16384;
  std::uint64_t seed = 0;
};

template <typename S>
struct AffineFitResult {
  Tensor<S> A;  ///< [3,3], warp(c) = c A + b
  Tensor<S> b;  ///< [3]
  std::vector<EpochLoss> history;
};

/// 12-parameter affine registration of a subject to the atlas, minimizing the
/// same intensity MSE with the same optimizer as the deformable model.
template <typename AtlasModel, typename S = typename AtlasModel::scalar>
AffineFitResult<S> affine_fit(const AtlasModel& atlas, const Volume& volume,
                              const AffineFitConfig& cfg,
                              const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  const StridedPlan plan = strided_plan(volume.dims(), cfg.coords_per_subject);
  Rng rng = Rng(cfg.seed).fork(404);

  std::vector<S> a0(9, S(0));
  a0[0] = a0[4] = a0[8] = S(1);
  Tensor<S> A({3, 3}, std::move(a0));
  Tensor<S> b = Tensor<S>::zeros({3});

  std::vector<Tensor<S>> params{A, b};
  Adam<S> opt(params, AdamConfig{cfg.lr0, 0.9, 0.999, 1e-8, cfg.lr_mult}, "affine");
  AffineFitResult<S> out;

  for (int iter = 0; iter < cfg.iters; ++iter) {
    opt.set_epoch(iter);
    auto batch = make_coord_batch<S>(volume, nullptr, plan, random_phases(plan, rng));

    Tape<S> t;
    std::vector<typename Tape<S>::Id> atlas_ids;
    for (const auto& p : atlas.params()) atlas_ids.push_back(t.constant(p));
    auto A_id = t.leaf(params[0]);
    auto b_id = t.leaf(params[1]);
    auto warped = t.add(t.matmul(t.constant(batch.coords), A_id), b_id);
    auto fwd = atlas.forward(t, atlas_ids, warped);
    auto mse = t.mean_all(t.square(t.sub(fwd.recon, t.constant(batch.target))));

    EpochLoss el;
    el.epoch = iter;
    el.recon = static_cast<double>(t.val(mse).item());
    el.total = el.recon;
    if (!std::isfinite(el.total))
      throw std::runtime_error("affine_fit: non-finite loss at iteration " + std::to_string(iter));
    out.history.push_back(el);
    if (on_epoch) on_epoch(el);

    t.backward(mse);
    opt.step(params, {t.grad(A_id), t.grad(b_id)});
  }
  out.A = params[0];
  out.b = params[1];
  return out;
}

template <typename S>
DeformationField<S> affine_field(const AffineFitResult<S>& fit) {
  return DeformationField<S>::affine(fit.A, {fit.b.at(0), fit.b.at(1), fit.b.at(2)});
}

// ---- evaluation -------------------------------------------------------------

/// Evaluate the atlas through a deformation field on an arbitrary grid:
/// subject-space intensities and labels without any explicit resampling of
/// the atlas itself.
template <typename S, typename AtlasModel>
std::pair<Volume, LabelVolume> warp_atlas(const AtlasModel& atlas,
                                          const DeformationField<S>& field,
                                          const Dims3& out_dims, const Spacing3& out_spacing) {
  const int C = atlas_num_classes(atlas);
  Volume vol = Volume::zeros(out_dims, out_spacing);
  LabelVolume lab = LabelVolume::zeros(out_dims, out_spacing, C);
  const std::int64_t B = out_dims.ny * out_dims.nx;

  for (std::int64_t iz = 0; iz < out_dims.nz; ++iz) {
    const double cz = axis_coord(iz, out_dims.nz);
    std::vector<S> cs(static_cast<std::size_t>(B) * 3);
    std::size_t r = 0;
    for (std::int64_t iy = 0; iy < out_dims.ny; ++iy) {
      for (std::int64_t ix = 0; ix < out_dims.nx; ++ix, ++r) {
        cs[r * 3 + 0] = static_cast<S>(axis_coord(iy, out_dims.ny));
        cs[r * 3 + 1] = static_cast<S>(axis_coord(ix, out_dims.nx));
        cs[r * 3 + 2] = static_cast<S>(cz);
      }
    }
    Tensor<S> warped = field.warp(Tensor<S>({B, 3}, std::move(cs)));

    Tape<S> t;
    std::vector<typename Tape<S>::Id> ids;
    for (const auto& p : atlas.params()) ids.push_back(t.constant(p));
    auto fwd = atlas.forward(t, ids, t.constant(warped));
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

/// Direct atlas evaluation (identity deformation).
template <typename AtlasModel, typename S = typename AtlasModel::scalar>
std::pair<Volume, LabelVolume> atlas_evaluate(const AtlasModel& atlas, const Dims3& out_dims,
                                              const Spacing3& out_spacing) {
  return warp_atlas(atlas, DeformationField<S>{}, out_dims, out_spacing);
}

}  // namespace nfa
