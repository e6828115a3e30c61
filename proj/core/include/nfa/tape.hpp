#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nfa/aligned.hpp"
#include "nfa/tensor.hpp"

namespace nfa {

/// Reverse-mode tape over Tensor<S>. Each primitive records one node; nodes
/// are appended in execution order, so every node's inputs precede it and a
/// single reverse sweep applies the chain rule. Values live on the tape for
/// the duration of a forward/backward pair; build a fresh tape per step.
///
/// Gradients are accumulated in slot order with fixed loop order, so two
/// backward passes over the same tape are bitwise identical.
template <typename S>
class Tape {
 public:
  using Id = std::int32_t;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  /// Differentiable input (parameter or coordinate we want gradients for).
  Id leaf(const Tensor<S>& v) { return push(v, /*needs_grad=*/true); }

  /// Non-differentiable input (targets, constants).
  Id constant(const Tensor<S>& v) { return push(v, /*needs_grad=*/false); }

  const Tensor<S>& val(Id id) const { return values_[static_cast<std::size_t>(id)]; }

  /// Gradient of the last backward() w.r.t. slot `id`; zero if the slot is
  /// not on any path to the root.
  Tensor<S> grad(Id id) const {
    const auto& v = values_[static_cast<std::size_t>(id)];
    if (static_cast<std::size_t>(id) >= grads_.size() || grads_[static_cast<std::size_t>(id)].empty())
      return Tensor<S>::zeros(v.shape());
    return Tensor<S>(v.shape(), grads_[static_cast<std::size_t>(id)]);
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  // ---- primitives -------------------------------------------------------

  Id matmul(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.shape().size() != 2 || B.shape().size() != 2 || A.shape()[1] != B.shape()[0])
      throw std::invalid_argument("matmul: incompatible shapes " + shape_str(A.shape()) + " x " +
                                  shape_str(B.shape()));
    const std::int64_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
    const S* c = aligned_product(A.data(), m, k, false, B.data(), k, n, false);
    std::vector<S> out(c, c + m * n);
    Id y = push(Tensor<S>({m, n}, std::move(out)), needs(a) || needs(b));
    record({y}, [a, b, y, m, k, n](Tape& t) {
      if (S* ga = t.grad_buf(a)) {
        const S* p =
            t.aligned_product(t.grad_data(y), m, n, false, t.val(b).data(), k, n, true);
        for (std::int64_t i = 0; i < m * k; ++i) ga[i] += p[i];
      }
      if (S* gb = t.grad_buf(b)) {
        const S* p =
            t.aligned_product(t.val(a).data(), m, k, true, t.grad_data(y), m, n, false);
        for (std::int64_t i = 0; i < k * n; ++i) gb[i] += p[i];
      }
    });
    return y;
  }

  Id add(Id a, Id b) { return binary(a, b, "add"); }
  Id sub(Id a, Id b) { return binary(a, b, "sub"); }
  Id mul(Id a, Id b) { return binary(a, b, "mul"); }
  Id div(Id a, Id b) { return binary(a, b, "div"); }

  /// x + c (constant scalar).
  Id addc(Id a, S c) {
    const auto& A = val(a);
    std::vector<S> out(A.vec());
    for (auto& x : out) x += c;
    Id y = push(Tensor<S>(A.shape(), std::move(out)), needs(a));
    record({y}, [a, y](Tape& t) {
      if (S* ga = t.grad_buf(a)) axpy(ga, t.grad_data(y), S(1), t.val(a).numel());
    });
    return y;
  }

  /// x * c (constant scalar).
  Id mulc(Id a, S c) {
    const auto& A = val(a);
    std::vector<S> out(A.vec());
    for (auto& x : out) x *= c;
    Id y = push(Tensor<S>(A.shape(), std::move(out)), needs(a));
    record({y}, [a, y, c](Tape& t) {
      if (S* ga = t.grad_buf(a)) axpy(ga, t.grad_data(y), c, t.val(a).numel());
    });
    return y;
  }

  Id neg(Id a) { return mulc(a, S(-1)); }

  Id sin(Id a) {
    return unary(a, "sin", [](S x) { return std::sin(x); },
                 [](S x, S) { return std::cos(x); });
  }
  Id cos(Id a) {
    return unary(a, "cos", [](S x) { return std::cos(x); },
                 [](S x, S) { return -std::sin(x); });
  }
  Id exp(Id a) {
    return unary(a, "exp", [](S x) { return std::exp(x); },
                 [](S, S y) { return y; });
  }
  Id log(Id a) {
    return unary(a, "log", [](S x) { return std::log(x); },
                 [](S x, S) { return S(1) / x; });
  }
  Id sqrt(Id a) {
    return unary(a, "sqrt", [](S x) { return std::sqrt(x); },
                 [](S, S y) { return S(0.5) / y; });
  }
  Id abs(Id a) {
    return unary(a, "abs", [](S x) { return std::abs(x); },
                 [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
  }
  Id square(Id a) {
    return unary(a, "square", [](S x) { return x * x; },
                 [](S x, S) { return S(2) * x; });
  }
  Id sigmoid(Id a) {
    return unary(a, "sigmoid",
                 [](S x) {
                   // Stable in both tails; clamped strictly inside (0,1) so
                   // downstream logs stay finite even at saturation.
                   const S y = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                                         : std::exp(x) / (S(1) + std::exp(x));
                   const S lo = std::numeric_limits<S>::min();
                   const S hi = S(1) - std::numeric_limits<S>::epsilon() / S(2);
                   return std::min(std::max(y, lo), hi);
                 },
                 [](S, S y) { return y * (S(1) - y); });
  }

  /// Row-wise softmax of a [r,c] matrix.
  Id softmax_rows(Id a) {
    const auto& A = val(a);
    if (A.shape().size() != 2)
      throw std::invalid_argument("softmax_rows: need 2-d input, got " + shape_str(A.shape()));
    const std::int64_t r = A.shape()[0], c = A.shape()[1];
    std::vector<S> out(static_cast<std::size_t>(r * c));
    const S* x = A.data();
    for (std::int64_t i = 0; i < r; ++i) {
      const S* row = x + i * c;
      S m = row[0];
      for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
      S sum = S(0);
      for (std::int64_t j = 0; j < c; ++j) {
        const S e = std::exp(row[j] - m);
        out[static_cast<std::size_t>(i * c + j)] = e;
        sum += e;
      }
      const S inv = S(1) / sum;
      for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] *= inv;
    }
    Id y = push(Tensor<S>({r, c}, std::move(out)), needs(a));
    record({y}, [a, y, r, c](Tape& t) {
      S* ga = t.grad_buf(a);
      if (!ga) return;
      const S* p = t.val(y).data();
      const S* dy = t.grad_data(y);
      for (std::int64_t i = 0; i < r; ++i) {
        S dot = S(0);
        for (std::int64_t j = 0; j < c; ++j) dot += dy[i * c + j] * p[i * c + j];
        for (std::int64_t j = 0; j < c; ++j) ga[i * c + j] += p[i * c + j] * (dy[i * c + j] - dot);
      }
    });
    return y;
  }

  /// Elementwise binary cross-entropy of probabilities `p` against targets
  /// `t` (same shape; targets carry no gradient). Probabilities are clamped
  /// away from {0,1}; the clamp region has zero gradient.
  Id bce(Id p, Id t) {
    const auto& P = val(p);
    const auto& T = val(t);
    if (P.shape() != T.shape())
      throw std::invalid_argument("bce: shape mismatch " + shape_str(P.shape()) + " vs " +
                                  shape_str(T.shape()));
    const S eps = std::is_same_v<S, float> ? S(1e-7) : S(1e-12);
    const std::int64_t n = P.numel();
    std::vector<S> out(static_cast<std::size_t>(n));
    const S* pp = P.data();
    const S* tt = T.data();
    for (std::int64_t i = 0; i < n; ++i) {
      const S pc = std::min(std::max(pp[i], eps), S(1) - eps);
      out[static_cast<std::size_t>(i)] = -(tt[i] * std::log(pc) + (S(1) - tt[i]) * std::log(S(1) - pc));
    }
    Id y = push(Tensor<S>(P.shape(), std::move(out)), needs(p));
    record({y}, [p, t, y, n, eps](Tape& tp) {
      S* gp = tp.grad_buf(p);
      if (!gp) return;
      const S* pp2 = tp.val(p).data();
      const S* tt2 = tp.val(t).data();
      const S* dy = tp.grad_data(y);
      for (std::int64_t i = 0; i < n; ++i) {
        if (pp2[i] <= eps || pp2[i] >= S(1) - eps) continue;
        gp[i] += dy[i] * (pp2[i] - tt2[i]) / (pp2[i] * (S(1) - pp2[i]));
      }
    });
    return y;
  }

  /// Complex Gabor wavelet psi(z) = exp(i*w0*z) * exp(-|s0*z|^2) applied
  /// elementwise to z = zr + i*zi, returned as a (real, imaginary) pair.
  std::pair<Id, Id> gabor(Id zr, Id zi, S w0, S s0) {
    const auto& R = val(zr);
    const auto& I = val(zi);
    if (R.shape() != I.shape())
      throw std::invalid_argument("gabor: shape mismatch " + shape_str(R.shape()) + " vs " +
                                  shape_str(I.shape()));
    const std::int64_t n = R.numel();
    std::vector<S> re(static_cast<std::size_t>(n)), im(static_cast<std::size_t>(n));
    const S* x = R.data();
    const S* yv = I.data();
    const S s2 = s0 * s0;
    for (std::int64_t i = 0; i < n; ++i) {
      const S amp = std::exp(-w0 * yv[i] - s2 * (x[i] * x[i] + yv[i] * yv[i]));
      re[static_cast<std::size_t>(i)] = amp * std::cos(w0 * x[i]);
      im[static_cast<std::size_t>(i)] = amp * std::sin(w0 * x[i]);
    }
    const bool ng = needs(zr) || needs(zi);
    // Copy the shape: push may reallocate values_ and invalidate R.
    Shape shp = R.shape();
    Id or_ = push(Tensor<S>(shp, std::move(re)), ng);
    Id oi = push(Tensor<S>(std::move(shp), std::move(im)), ng);
    record({or_, oi}, [zr, zi, or_, oi, n, w0, s2](Tape& t) {
      S* gx = t.grad_buf(zr);
      S* gy = t.grad_buf(zi);
      if (!gx && !gy) return;
      const S* x2 = t.val(zr).data();
      const S* y2 = t.val(zi).data();
      const S* re2 = t.val(or_).data();
      const S* im2 = t.val(oi).data();
      const S* gr = t.touched(or_) ? t.grad_data(or_) : nullptr;
      const S* gi = t.touched(oi) ? t.grad_data(oi) : nullptr;
      for (std::int64_t i = 0; i < n; ++i) {
        const S dre_dx = -S(2) * s2 * x2[i] * re2[i] - w0 * im2[i];
        const S dim_dx = -S(2) * s2 * x2[i] * im2[i] + w0 * re2[i];
        const S damp = -w0 - S(2) * s2 * y2[i];
        const S dre_dy = damp * re2[i];
        const S dim_dy = damp * im2[i];
        const S sr = gr ? gr[i] : S(0);
        const S si = gi ? gi[i] : S(0);
        if (gx) gx[i] += sr * dre_dx + si * dim_dx;
        if (gy) gy[i] += sr * dre_dy + si * dim_dy;
      }
    });
    return {or_, oi};
  }

  /// Concatenate [r,c_i] matrices along columns.
  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const std::int64_t r = val(parts[0]).shape()[0];
    std::int64_t ctot = 0;
    bool ng = false;
    for (Id p : parts) {
      const auto& V = val(p);
      if (V.shape().size() != 2 || V.shape()[0] != r)
        throw std::invalid_argument("concat_cols: row mismatch, got " + shape_str(V.shape()));
      ctot += V.shape()[1];
      ng = ng || needs(p);
    }
    std::vector<S> out(static_cast<std::size_t>(r * ctot));
    std::int64_t off = 0;
    for (Id p : parts) {
      const auto& V = val(p);
      const std::int64_t c = V.shape()[1];
      for (std::int64_t i = 0; i < r; ++i)
        std::copy_n(V.data() + i * c, c, out.data() + i * ctot + off);
      off += c;
    }
    Id y = push(Tensor<S>({r, ctot}, std::move(out)), ng);
    std::vector<Id> in = parts;
    record({y}, [in, y, r, ctot](Tape& t) {
      const S* dy = t.grad_data(y);
      std::int64_t off2 = 0;
      for (Id p : in) {
        const std::int64_t c = t.val(p).shape()[1];
        if (S* gp = t.grad_buf(p)) {
          for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) gp[i * c + j] += dy[i * ctot + off2 + j];
        }
        off2 += c;
      }
    });
    return y;
  }

  /// Columns [c0, c0+len) of a [r,c] matrix.
  Id slice_cols(Id a, std::int64_t c0, std::int64_t len) {
    const auto& A = val(a);
    if (A.shape().size() != 2 || c0 < 0 || c0 + len > A.shape()[1])
      throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," +
                                  std::to_string(c0 + len) + ") out of " + shape_str(A.shape()));
    const std::int64_t r = A.shape()[0], c = A.shape()[1];
    std::vector<S> out(static_cast<std::size_t>(r * len));
    for (std::int64_t i = 0; i < r; ++i)
      std::copy_n(A.data() + i * c + c0, len, out.data() + i * len);
    Id y = push(Tensor<S>({r, len}, std::move(out)), needs(a));
    record({y}, [a, y, c0, len, r, c](Tape& t) {
      if (S* ga = t.grad_buf(a)) {
        const S* dy = t.grad_data(y);
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < len; ++j) ga[i * c + c0 + j] += dy[i * len + j];
      }
    });
    return y;
  }

  Id reshape(Id a, Shape shape) {
    const auto& A = val(a);
    Tensor<S> v = A.reshaped(std::move(shape));
    Id y = push(v, needs(a));
    record({y}, [a, y](Tape& t) {
      if (S* ga = t.grad_buf(a)) axpy(ga, t.grad_data(y), S(1), t.val(a).numel());
    });
    return y;
  }

  Id sum_all(Id a) {
    const auto& A = val(a);
    S s = S(0);
    for (std::int64_t i = 0; i < A.numel(); ++i) s += A.at(i);
    Id y = push(Tensor<S>::scalar(s), needs(a));
    record({y}, [a, y](Tape& t) {
      if (S* ga = t.grad_buf(a)) {
        const S g = t.grad_data(y)[0];
        const std::int64_t n = t.val(a).numel();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
      }
    });
    return y;
  }

  Id mean_all(Id a) {
    const auto n = val(a).numel();
    return mulc(sum_all(a), S(1) / static_cast<S>(n));
  }

  /// Mean over each k*k window of a [h,w] image, valid region only.
  Id box_mean2d(Id a, int k) {
    const auto& A = val(a);
    if (A.shape().size() != 2 || A.shape()[0] < k || A.shape()[1] < k)
      throw std::invalid_argument("box_mean2d: window " + std::to_string(k) + " too large for " +
                                  shape_str(A.shape()));
    const std::int64_t h = A.shape()[0], w = A.shape()[1];
    const std::int64_t oh = h - k + 1, ow = w - k + 1;
    const S inv = S(1) / static_cast<S>(k * k);
    std::vector<S> out(static_cast<std::size_t>(oh * ow), S(0));
    const S* x = A.data();
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t di = 0; di < k; ++di)
        for (std::int64_t j = 0; j < ow; ++j) {
          S s = S(0);
          for (std::int64_t dj = 0; dj < k; ++dj) s += x[(i + di) * w + j + dj];
          out[static_cast<std::size_t>(i * ow + j)] += s;
        }
    for (auto& v : out) v *= inv;
    Id y = push(Tensor<S>({oh, ow}, std::move(out)), needs(a));
    record({y}, [a, y, h, w, oh, ow, k, inv](Tape& t) {
      if (S* ga = t.grad_buf(a)) {
        const S* dy = t.grad_data(y);
        for (std::int64_t i = 0; i < oh; ++i)
          for (std::int64_t di = 0; di < k; ++di)
            for (std::int64_t j = 0; j < ow; ++j) {
              const S g = dy[i * ow + j] * inv;
              for (std::int64_t dj = 0; dj < k; ++dj) ga[(i + di) * w + j + dj] += g;
            }
      }
      (void)h;
    });
    return y;
  }

  /// Trilinear sample of a {ny,nx,nz,ch} grid at [B,3] coordinates given in
  /// the normalized [-1,1] convention (axis order y,x,z). Out-of-range
  /// coordinates clamp to the border; the clamped direction gets zero
  /// coordinate gradient. Differentiable w.r.t. both grid and coordinates.
  Id grid_sample3d(Id grid, Id coords) {
    const auto& G = val(grid);
    const auto& C = val(coords);
    if (G.shape().size() != 4)
      throw std::invalid_argument("grid_sample3d: grid must be 4-d, got " + shape_str(G.shape()));
    if (C.shape().size() != 2 || C.shape()[1] != 3)
      throw std::invalid_argument("grid_sample3d: coords must be [B,3], got " + shape_str(C.shape()));
    if (G.shape()[0] < 2 || G.shape()[1] < 2 || G.shape()[2] < 2)
      throw std::invalid_argument("grid_sample3d: spatial extents must be >= 2, got " +
                                  shape_str(G.shape()));
    const std::int64_t ny = G.shape()[0], nx = G.shape()[1], nz = G.shape()[2], ch = G.shape()[3];
    const std::int64_t B = C.shape()[0];
    std::vector<S> out(static_cast<std::size_t>(B * ch));
    sample_kernel(G.data(), C.data(), out.data(), nullptr, nullptr, nullptr, ny, nx, nz, ch, B);
    Id y = push(Tensor<S>({B, ch}, std::move(out)), needs(grid) || needs(coords));
    record({y}, [grid, coords, y, ny, nx, nz, ch, B](Tape& t) {
      S* gg = t.grad_buf(grid);
      S* gc = t.grad_buf(coords);
      if (!gg && !gc) return;
      sample_kernel(t.val(grid).data(), t.val(coords).data(), nullptr, t.grad_data(y), gg, gc, ny,
                    nx, nz, ch, B);
    });
    return y;
  }

  // ---- backward ---------------------------------------------------------

  /// Reverse sweep from `root` with an explicit seed (shape must match).
  void backward(Id root, const Tensor<S>& seed) {
    if (nodes_.empty() && values_.empty()) throw std::invalid_argument("backward: empty tape");
    if (seed.shape() != val(root).shape())
      throw std::invalid_argument("backward: seed shape " + shape_str(seed.shape()) +
                                  " does not match root " + shape_str(val(root).shape()));
    grads_.assign(values_.size(), {});
    touched_.assign(values_.size(), 0);
    S* g = grad_buf_force(root);
    axpy(g, seed.data(), S(1), seed.numel());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      bool any = false;
      for (Id o : it->outputs) any = any || touched_[static_cast<std::size_t>(o)];
      if (any) it->backward(*this);
    }
  }

  /// Backward from a scalar root with seed 1.
  void backward(Id root) { backward(root, Tensor<S>::full(val(root).shape(), S(1))); }

  // Accessors used by node closures.
  S* grad_buf(Id id) {
    if (!needs_grad_[static_cast<std::size_t>(id)]) return nullptr;
    return grad_buf_force(id);
  }
  const S* grad_data(Id id) const { return grads_[static_cast<std::size_t>(id)].data(); }
  bool touched(Id id) const { return touched_[static_cast<std::size_t>(id)] != 0; }

 private:
  struct Scratch {
    AlignedVec<S> a, b, c;
  };
  static Scratch& scratch() {
    static thread_local Scratch s;
    return s;
  }

  /// op(A) * op(B) on 64-byte aligned copies: Eigen picks the same kernel
  /// path no matter where the operands originally lived, which keeps backward
  /// results bitwise reproducible. Returns a pointer into shared scratch,
  /// valid until the next call.
  const S* aligned_product(const S* A, std::int64_t ra, std::int64_t ca, bool ta, const S* B,
                           std::int64_t rb, std::int64_t cb, bool tb) {
    auto& s = scratch();
    s.a.assign(A, A + ra * ca);
    s.b.assign(B, B + rb * cb);
    const std::int64_t m = ta ? ca : ra;
    const std::int64_t n = tb ? rb : cb;
    s.c.resize(static_cast<std::size_t>(m * n));
    CMap ma(s.a.data(), ra, ca);
    CMap mb(s.b.data(), rb, cb);
    MMap mc(s.c.data(), m, n);
    if (!ta && !tb)
      mc.noalias() = ma * mb;
    else if (ta && !tb)
      mc.noalias() = ma.transpose() * mb;
    else if (!ta && tb)
      mc.noalias() = ma * mb.transpose();
    else
      mc.noalias() = ma.transpose() * mb.transpose();
    return s.c.data();
  }

  struct Node {
    std::vector<Id> outputs;
    std::function<void(Tape&)> backward;
  };

  static void axpy(S* dst, const S* src, S a, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
  }

  S* grad_buf_force(Id id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(static_cast<std::size_t>(val(id).numel()), S(0));
    touched_[static_cast<std::size_t>(id)] = 1;
    return g.data();
  }

  bool needs(Id id) const { return needs_grad_[static_cast<std::size_t>(id)] != 0; }

  Id push(Tensor<S> v, bool needs_grad) {
    values_.push_back(std::move(v));
    needs_grad_.push_back(needs_grad ? 1 : 0);
    return static_cast<Id>(values_.size() - 1);
  }

  void record(std::vector<Id> outputs, std::function<void(Tape&)> fn) {
    nodes_.push_back(Node{std::move(outputs), std::move(fn)});
  }

  enum class Bcast { None, BScalar, BRow, AScalar, ARow };

  Bcast bcast_kind(const Shape& a, const Shape& b, const char* op) const {
    if (a == b) return Bcast::None;
    if (shape_numel(b) == 1) return Bcast::BScalar;
    if (shape_numel(a) == 1) return Bcast::AScalar;
    if (a.size() == 2 && ((b.size() == 1 && b[0] == a[1]) || (b.size() == 2 && b[0] == 1 && b[1] == a[1])))
      return Bcast::BRow;
    if (b.size() == 2 && ((a.size() == 1 && a[0] == b[1]) || (a.size() == 2 && a[0] == 1 && a[1] == b[1])))
      return Bcast::ARow;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }

  // Generic elementwise binary op with scalar / row-vector broadcasting.
  Id binary(Id a, Id b, const char* opname) {
    const auto& A = val(a);
    const auto& B = val(b);
    const Bcast kind = bcast_kind(A.shape(), B.shape(), opname);
    // Normalize to "A full, B possibly broadcast" by swapping when A is the
    // broadcast side; subtraction/division handle the swap via flags.
    const bool swapped = (kind == Bcast::AScalar || kind == Bcast::ARow);
    const Id fa = swapped ? b : a;
    const Id fb = swapped ? a : b;
    const Bcast k2 = swapped ? (kind == Bcast::AScalar ? Bcast::BScalar : Bcast::BRow) : kind;
    const char op = opname[0] == 'a' ? '+' : (opname[0] == 's' ? '-' : (opname[0] == 'm' ? '*' : '/'));

    const auto& FA = val(fa);
    const auto& FB = val(fb);
    const std::int64_t n = FA.numel();
    const std::int64_t cols = FA.shape().size() == 2 ? FA.shape()[1] : n;
    std::vector<S> out(static_cast<std::size_t>(n));
    const S* xa = FA.data();
    const S* xb = FB.data();
    auto bval = [&](std::int64_t i) -> S {
      switch (k2) {
        case Bcast::BScalar: return xb[0];
        case Bcast::BRow: return xb[i % cols];
        default: return xb[i];
      }
    };
    for (std::int64_t i = 0; i < n; ++i) {
      const S u = swapped ? bval(i) : xa[i];
      const S v = swapped ? xa[i] : bval(i);
      switch (op) {
        case '+': out[static_cast<std::size_t>(i)] = u + v; break;
        case '-': out[static_cast<std::size_t>(i)] = u - v; break;
        case '*': out[static_cast<std::size_t>(i)] = u * v; break;
        default: out[static_cast<std::size_t>(i)] = u / v; break;
      }
    }
    Id y = push(Tensor<S>(FA.shape(), std::move(out)), needs(a) || needs(b));
    record({y}, [fa, fb, y, k2, op, swapped, n, cols](Tape& t) {
      const S* dy = t.grad_data(y);
      const S* xa2 = t.val(fa).data();
      const S* xb2 = t.val(fb).data();
      auto bval2 = [&](std::int64_t i) -> S {
        switch (k2) {
          case Bcast::BScalar: return xb2[0];
          case Bcast::BRow: return xb2[i % cols];
          default: return xb2[i];
        }
      };
      // d/du and d/dv of (u op v) where u is the left operand.
      for (int side = 0; side < 2; ++side) {
        const Id target = side == 0 ? fa : fb;
        S* g = t.grad_buf(target);
        if (!g) continue;
        const bool full_side = (side == 0);
        for (std::int64_t i = 0; i < n; ++i) {
          const S u = swapped ? bval2(i) : xa2[i];
          const S v = swapped ? xa2[i] : bval2(i);
          // Gradient w.r.t. the full-shaped operand (fa) or broadcast (fb).
          const bool wrt_left = full_side != swapped;  // is this the left operand of op?
          S gi;
          switch (op) {
            case '+': gi = dy[i]; break;
            case '-': gi = wrt_left ? dy[i] : -dy[i]; break;
            case '*': gi = dy[i] * (wrt_left ? v : u); break;
            default:
              gi = wrt_left ? dy[i] / v : -dy[i] * u / (v * v);
              break;
          }
          if (full_side) {
            g[i] += gi;
          } else {
            switch (k2) {
              case Bcast::BScalar: g[0] += gi; break;
              case Bcast::BRow: g[i % cols] += gi; break;
              default: g[i] += gi; break;
            }
          }
        }
      }
    });
    return y;
  }

  template <typename F, typename DF>
  Id unary(Id a, const char* /*name*/, F f, DF df) {
    const auto& A = val(a);
    const std::int64_t n = A.numel();
    std::vector<S> out(static_cast<std::size_t>(n));
    const S* x = A.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(x[i]);
    Id y = push(Tensor<S>(A.shape(), std::move(out)), needs(a));
    record({y}, [a, y, df, n](Tape& t) {
      if (S* ga = t.grad_buf(a)) {
        const S* x2 = t.val(a).data();
        const S* y2 = t.val(y).data();
        const S* dy = t.grad_data(y);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += dy[i] * df(x2[i], y2[i]);
      }
    });
    return y;
  }

  /// Shared forward/backward kernel for grid_sample3d. When `out` is set,
  /// writes samples; when `dy` is set, scatters into `ggrid`/`gcoords`.
  static void sample_kernel(const S* grid, const S* coords, S* out, const S* dy, S* ggrid,
                            S* gcoords, std::int64_t ny, std::int64_t nx, std::int64_t nz,
                            std::int64_t ch, std::int64_t B) {
    const std::int64_t dims[3] = {ny, nx, nz};
    const std::int64_t strides[3] = {nx * nz * ch, nz * ch, ch};
    for (std::int64_t b = 0; b < B; ++b) {
      std::int64_t i0[3];
      S w[3], dfdc[3];
      bool interior[3];
      for (int ax = 0; ax < 3; ++ax) {
        const std::int64_t n = dims[ax];
        S f = (coords[b * 3 + ax] + S(1)) * S(0.5) * static_cast<S>(n - 1);
        interior[ax] = (f > S(0) && f < static_cast<S>(n - 1));
        f = std::min(std::max(f, S(0)), static_cast<S>(n - 1));
        std::int64_t i = static_cast<std::int64_t>(std::floor(f));
        i = std::min(i, n - 2 >= 0 ? n - 2 : std::int64_t(0));
        i0[ax] = i;
        w[ax] = n > 1 ? f - static_cast<S>(i) : S(0);
        dfdc[ax] = interior[ax] ? S(0.5) * static_cast<S>(n - 1) : S(0);
      }
      for (std::int64_t c = 0; c < ch; ++c) {
        S value = S(0);
        S dval[3] = {S(0), S(0), S(0)};
        for (int corner = 0; corner < 8; ++corner) {
          const int dy_ = corner & 1, dx_ = (corner >> 1) & 1, dz_ = (corner >> 2) & 1;
          const S wy = dy_ ? w[0] : S(1) - w[0];
          const S wx = dx_ ? w[1] : S(1) - w[1];
          const S wz = dz_ ? w[2] : S(1) - w[2];
          const std::int64_t idx = (i0[0] + dy_) * strides[0] + (i0[1] + dx_) * strides[1] +
                                   (i0[2] + dz_) * strides[2] + c;
          const S g = grid[idx];
          if (out) value += wy * wx * wz * g;
          if (dy) {
            const S gy = dy[b * ch + c];
            if (ggrid) ggrid[idx] += gy * wy * wx * wz;
            if (gcoords) {
              dval[0] += g * (dy_ ? S(1) : S(-1)) * wx * wz;
              dval[1] += g * wy * (dx_ ? S(1) : S(-1)) * wz;
              dval[2] += g * wy * wx * (dz_ ? S(1) : S(-1));
            }
          }
        }
        if (out) out[b * ch + c] = value;
        if (dy && gcoords) {
          const S gy = dy[b * ch + c];
          for (int ax = 0; ax < 3; ++ax) gcoords[b * 3 + ax] += gy * dval[ax] * dfdc[ax];
        }
      }
    }
  }

  std::vector<Tensor<S>> values_;
  std::vector<std::uint8_t> needs_grad_;
  std::vector<Node> nodes_;
  std::vector<std::vector<S>> grads_;
  std::vector<std::uint8_t> touched_;
};

}  // namespace nfa
