#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "nfa/tensor.hpp"

namespace nfa {

struct AdamConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 1.0;  ///< exponential LR multiplier per epoch, in (0,1]
};

/// Adam with bias correction over one group of parameter tensors. The
/// effective learning rate is lr0 * decay^epoch where the epoch counter is
/// advanced by the caller's schedule (per epoch or per iteration, whichever
/// the training loop treats as its scheduler unit).
template <typename S>
class Adam {
 public:
  Adam(const std::vector<Tensor<S>>& params, AdamConfig cfg, std::string group_name = "params")
      : cfg_(cfg), name_(std::move(group_name)) {
    if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0 && cfg.beta2 > 0.0 && cfg.beta2 < 1.0))
      throw std::invalid_argument("Adam: betas must lie in (0,1)");
    if (!(cfg.decay > 0.0 && cfg.decay <= 1.0))
      throw std::invalid_argument("Adam: decay must lie in (0,1]");
    for (const auto& p : params) {
      m_.push_back(Tensor<S>::zeros(p.shape()));
      v_.push_back(Tensor<S>::zeros(p.shape()));
    }
  }

  void set_epoch(std::int64_t epoch) { lr_scale_ = std::pow(cfg_.decay, static_cast<double>(epoch)); }

  double effective_lr() const { return cfg_.lr0 * lr_scale_; }
  std::int64_t step_count() const { return step_; }
  const std::string& name() const { return name_; }

  /// One update. Parameters are replaced with new tensors (tensors stay
  /// immutable values). Throws if any gradient is non-finite.
  void step(std::vector<Tensor<S>>& params, const std::vector<Tensor<S>>& grads) {
    if (params.size() != grads.size() || params.size() != m_.size())
      throw std::invalid_argument("Adam(" + name_ + "): group size mismatch");
    ++step_;
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    const S corr1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    const S corr2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    const S lr = static_cast<S>(effective_lr());
    const S eps = static_cast<S>(cfg_.eps);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& p = params[k];
      const auto& g = grads[k];
      if (p.shape() != g.shape())
        throw std::invalid_argument("Adam(" + name_ + "): grad shape " + shape_str(g.shape()) +
                                    " vs param " + shape_str(p.shape()));
      if (!g.all_finite())
        throw std::runtime_error("Adam(" + name_ + "): non-finite gradient in block " +
                                 std::to_string(k));
      const std::int64_t n = p.numel();
      std::vector<S> pn(p.vec()), mn(m_[k].vec()), vn(v_[k].vec());
      const S* gd = g.data();
      for (std::int64_t i = 0; i < n; ++i) {
        mn[i] = b1 * mn[i] + (S(1) - b1) * gd[i];
        vn[i] = b2 * vn[i] + (S(1) - b2) * gd[i] * gd[i];
        const S mhat = mn[i] / corr1;
        const S vhat = vn[i] / corr2;
        pn[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      params[k] = Tensor<S>(p.shape(), std::move(pn));
      m_[k] = Tensor<S>(p.shape(), std::move(mn));
      v_[k] = Tensor<S>(p.shape(), std::move(vn));
    }
  }

 private:
  AdamConfig cfg_;
  std::string name_;
  std::vector<Tensor<S>> m_, v_;
  std::int64_t step_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace nfa
