#pragma once

// Losses with analytic gradients. Everything here is float64 and evaluated in
// a fixed sequential order, so repeated calls are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

struct LossValue {
  double value = 0.0;
  std::map<std::string, Tensor> grads;
  std::map<std::string, double> components;
  /// Hash of the discrete branch pattern (relu activity, argmin/argmax
  /// choices) the value was computed under. Equal signatures mean the loss is
  /// smooth between the two points.
  std::uint64_t branch_signature = 0;

  const Tensor& grad(const std::string& name) const {
    auto it = grads.find(name);
    require(it != grads.end(), ErrorKind::invalid_argument, "no gradient named '" + name + "'");
    return it->second;
  }
};

namespace detail {

inline std::uint64_t mix_signature(std::uint64_t h, std::uint64_t bit) {
  h ^= bit + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  return h;
}

/// Mean-centred, unit-norm copy of `v`. Returns the pre-scaling norm, or 0
/// when the vector is constant to within rounding.
template <class Real>
Real centre_and_normalize(std::span<const double> v, std::vector<Real>& out) {
  out.assign(v.begin(), v.end());
  Real mean = 0, scale = 0;
  for (double x : v) {
    mean += x;
    scale = std::max<Real>(scale, std::abs(x));
  }
  mean /= static_cast<Real>(v.size());
  Real sq = 0;
  for (Real& x : out) {
    x -= mean;
    sq += x * x;
  }
  const Real norm = std::sqrt(sq);
  if (norm == 0 || norm <= Real(1e-12) * std::sqrt(static_cast<Real>(v.size())) * scale) return 0;
  for (Real& x : out) x /= norm;
  return norm;
}

inline std::vector<double> column(const Tensor& m, std::size_t j) {
  std::vector<double> c(m.dim(0));
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = m(i, j);
  return c;
}

template <class Real>
Real log_sum_exp(std::span<const double> z) {
  Real m = z[0];
  for (double v : z) m = std::max<Real>(m, v);
  Real s = 0;
  for (double v : z) s += std::exp(static_cast<Real>(v) - m);
  return m + std::log(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Concept alignment
//
// The kernels below are templated on the accumulation type. The public
// functions use double; the gradient checker evaluates values in long double
// so its central differences are not swamped by float64 rounding.

template <class Real>
struct CubicSimT {
  Real value = 0;
  std::vector<Real> grad_q;
};

using CubicSim = CubicSimT<double>;

namespace detail {

template <class Real>
CubicSimT<Real> cubic_cos_sim(std::span<const double> q, std::span<const double> p, bool with_grad) {
  require(q.size() == p.size() && !q.empty(), ErrorKind::shape_mismatch, "cubic_cos_sim: length mismatch");
  std::vector<Real> qh, ph;
  const Real qn = centre_and_normalize<Real>(q, qh);
  const Real pn = centre_and_normalize<Real>(p, ph);
  require(qn > 0, ErrorKind::zero_variance, "cubic_cos_sim: activation vector has zero variance");
  require(pn > 0, ErrorKind::zero_variance, "cubic_cos_sim: target vector has zero variance");
  Real c = 0;
  for (std::size_t i = 0; i < qh.size(); ++i) c += qh[i] * ph[i];
  c = std::clamp<Real>(c, -1, 1);
  CubicSimT<Real> out{c * c * c, {}};
  if (with_grad) {
    // d cos / dq = (p_hat - cos * q_hat) / |q - mean(q)|; both hats are
    // zero-mean, so the centring projection leaves this unchanged.
    out.grad_q.resize(q.size());
    const Real scale = 3 * c * c / qn;
    for (std::size_t i = 0; i < q.size(); ++i) out.grad_q[i] = scale * (ph[i] - c * qh[i]);
  }
  return out;
}

/// -sum_j sim(Q[:,j], P[:,j]); fills dL/dQ when `grad` is non-null.
template <class Real>
Real negative_alignment(const Tensor& q, const Tensor& p, Tensor* grad, const char* level) {
  require_rank(q, 2, "concept activations");
  require_rank(p, 2, "concept targets");
  require(q.shape() == p.shape(), ErrorKind::shape_mismatch,
          std::string(level) + " activations " + shape_string(q.shape()) + " vs targets " + shape_string(p.shape()));
  require(q.dim(0) >= 2, ErrorKind::invalid_argument, "alignment needs at least two samples");
  if (grad) *grad = Tensor(q.shape());
  Real total = 0;
  for (std::size_t j = 0; j < q.dim(1); ++j) {
    const auto qc = column(q, j), pc = column(p, j);
    CubicSimT<Real> s;
    try {
      s = cubic_cos_sim<Real>(qc, pc, grad != nullptr);
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(level) + " concept " + std::to_string(j) + ": " + e.message());
    }
    total -= s.value;
    if (grad)
      for (std::size_t i = 0; i < q.dim(0); ++i) (*grad)(i, j) = -static_cast<double>(s.grad_q[i]);
  }
  return total;
}

}  // namespace detail

/// cos(q_hat, p_hat)^3 where each vector is mean-centred and scaled to unit
/// norm. The gradient is taken with respect to the raw `q`.
inline CubicSim cubic_cos_sim(std::span<const double> q, std::span<const double> p) {
  return detail::cubic_cos_sim<double>(q, p, true);
}

/// L_CBL = -sum_i sim(q_i^l, P_i^l) - sum_i sim(q_i^h, P_i^h) over neuron columns.
inline LossValue cbl_loss(const Tensor& q_low, const Tensor& p_low, const Tensor& q_high, const Tensor& p_high) {
  LossValue out;
  Tensor gl, gh;
  const double low = detail::negative_alignment<double>(q_low, p_low, &gl, "low");
  const double high = detail::negative_alignment<double>(q_high, p_high, &gh, "high");
  out.value = low + high;
  out.components = {{"low", low}, {"high", high}};
  out.grads.emplace("Q_low", std::move(gl));
  out.grads.emplace("Q_high", std::move(gh));
  return out;
}

template <class Real>
Real cbl_value(const Tensor& q_low, const Tensor& p_low, const Tensor& q_high, const Tensor& p_high) {
  return detail::negative_alignment<Real>(q_low, p_low, nullptr, "low") +
         detail::negative_alignment<Real>(q_high, p_high, nullptr, "high");
}

// ---------------------------------------------------------------------------
// Saliency

struct SaliencyMap {
  Tensor map;  ///< [H x W], L2-normalised or all zero
};

namespace detail {

/// Saliency for one sample given channel weights w (length D).
/// `pre` receives the pre-activation sum_d w_d A(h,w,d); returns ||relu(pre)||.
template <class Real>
Real saliency(std::span<const double> sample, std::size_t hw, std::size_t d, const std::vector<Real>& w,
              std::vector<Real>& pre, std::vector<Real>& map) {
  pre.assign(hw, 0);
  map.assign(hw, 0);
  Real sq = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    Real z = 0;
    for (std::size_t c = 0; c < d; ++c) z += w[c] * sample[p * d + c];
    pre[p] = z;
    map[p] = z > 0 ? z : 0;
    sq += map[p] * map[p];
  }
  const Real norm = std::sqrt(sq);
  if (norm > 0)
    for (Real& m : map) m /= norm;
  return norm;
}

/// Column sums of a [k x D] weight matrix: the gradient of sum_i c_i with
/// respect to the pooled feature when c = W * pooled.
template <class Real>
std::vector<Real> channel_weights(const Tensor& w) {
  std::vector<Real> out(w.dim(1), 0);
  for (std::size_t r = 0; r < w.dim(0); ++r)
    for (std::size_t c = 0; c < w.dim(1); ++c) out[c] += w(r, c);
  return out;
}

/// Back-propagates dL/dS through S = relu(z)/||relu(z)|| and z = sum_d w_d A
/// into dL/dw (accumulated).
template <class Real>
void saliency_backward(std::span<const double> sample, std::size_t hw, std::size_t d, const std::vector<Real>& pre,
                       const std::vector<Real>& map, Real norm, const std::vector<Real>& grad_map,
                       std::vector<Real>& grad_w) {
  if (norm == 0) return;
  Real dot = 0;
  for (std::size_t p = 0; p < hw; ++p) dot += map[p] * grad_map[p];
  for (std::size_t p = 0; p < hw; ++p) {
    if (!(pre[p] > 0)) continue;
    const Real gz = (grad_map[p] - map[p] * dot) / norm;
    for (std::size_t c = 0; c < d; ++c) grad_w[c] += gz * sample[p * d + c];
  }
}

}  // namespace detail

/// Grad-CAM style map for one sample: relu(sum_d w_d A(h,w,d)) / L2 norm with
/// w the column sums of `concept_weights`.
inline SaliencyMap saliency_map(const Tensor& features, const Tensor& concept_weights) {
  require_rank(features, 3, "saliency features");
  require_rank(concept_weights, 2, "concept weights");
  require(features.dim(2) == concept_weights.dim(1), ErrorKind::shape_mismatch,
          "feature depth " + std::to_string(features.dim(2)) + " vs weight width " +
              std::to_string(concept_weights.dim(1)));
  const std::size_t hw = features.dim(0) * features.dim(1), d = features.dim(2);
  std::vector<double> pre, map;
  detail::saliency<double>(features.values(), hw, d, detail::channel_weights<double>(concept_weights), pre, map);
  return SaliencyMap{Tensor(Shape{features.dim(0), features.dim(1)}, std::move(map))};
}

enum class VisualVariant { mse, iou };

inline std::string_view to_string(VisualVariant v) { return v == VisualVariant::mse ? "mse" : "iou"; }

inline VisualVariant parse_visual_variant(std::string_view s) {
  if (s == "mse") return VisualVariant::mse;
  if (s == "iou") return VisualVariant::iou;
  fail(ErrorKind::invalid_argument, "unknown visual variant '" + std::string(s) + "' (expected mse|iou)");
}

namespace detail {

/// Soft-IoU penalty between two maps binarised at half their maxima:
/// 1 - sum(min(Bl,Bh)) / sum(max(Bl,Bh)), Bx = Sx * [Sx >= max(Sx)/2].
/// Gradients treat the binarisation masks as constants.
template <class Real>
Real iou_penalty(const std::vector<Real>& sl, const std::vector<Real>& sh, std::vector<Real>& gl,
                 std::vector<Real>& gh, std::uint64_t& sig) {
  const std::size_t n = sl.size();
  const Real ml = *std::max_element(sl.begin(), sl.end()), mh = *std::max_element(sh.begin(), sh.end());
  std::vector<Real> bl(n), bh(n), keep_l(n), keep_h(n);
  for (std::size_t p = 0; p < n; ++p) {
    keep_l[p] = ml > 0 && sl[p] >= ml / 2 ? 1 : 0;
    keep_h[p] = mh > 0 && sh[p] >= mh / 2 ? 1 : 0;
    bl[p] = sl[p] * keep_l[p];
    bh[p] = sh[p] * keep_h[p];
  }
  Real inter = 0, uni = 0;
  std::vector<Real> di_l(n, 0), di_h(n, 0), du_l(n, 0), du_h(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const bool low_smaller = bl[p] <= bh[p];
    inter += low_smaller ? bl[p] : bh[p];
    uni += low_smaller ? bh[p] : bl[p];
    (low_smaller ? di_l : di_h)[p] = 1;
    (low_smaller ? du_h : du_l)[p] = 1;
    sig = mix_signature(sig, (keep_l[p] > 0 ? 1u : 0u) | (keep_h[p] > 0 ? 2u : 0u) | (low_smaller ? 4u : 0u));
  }
  gl.assign(n, 0);
  gh.assign(n, 0);
  if (uni <= 0) return 0;
  for (std::size_t p = 0; p < n; ++p) {
    gl[p] = -(di_l[p] * uni - inter * du_l[p]) / (uni * uni) * keep_l[p];
    gh[p] = -(di_h[p] * uni - inter * du_h[p]) / (uni * uni) * keep_h[p];
  }
  return 1 - inter / uni;
}

template <class Real>
Real visual(const Tensor& features, const Tensor& w_low, const Tensor& w_high, VisualVariant variant,
            Tensor* grad_low, Tensor* grad_high, std::uint64_t* signature) {
  require_rank(features, 4, "visual loss features (spatial [N x H x W x D])");
  require_rank(w_low, 2, "W_low");
  require_rank(w_high, 2, "W_high");
  const std::size_t n = features.dim(0), hw = features.dim(1) * features.dim(2), d = features.dim(3);
  require(w_low.dim(1) == d && w_high.dim(1) == d, ErrorKind::shape_mismatch,
          "concept weights must have width " + std::to_string(d));
  require(n > 0, ErrorKind::invalid_argument, "visual loss of an empty batch");

  const auto cw_low = channel_weights<Real>(w_low), cw_high = channel_weights<Real>(w_high);
  std::vector<Real> gw_low(d, 0), gw_high(d, 0);
  std::vector<Real> pre_l, pre_h, sl, sh, gl(hw), gh(hw);
  const Real inv_n = Real(1) / static_cast<Real>(n);
  Real total = 0;
  std::uint64_t sig = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto x = features.row(i);
    const Real nl = saliency<Real>(x, hw, d, cw_low, pre_l, sl);
    const Real nh = saliency<Real>(x, hw, d, cw_high, pre_h, sh);
    for (std::size_t p = 0; p < hw; ++p)
      sig = mix_signature(sig, (pre_l[p] > 0 ? 1u : 0u) | (pre_h[p] > 0 ? 2u : 0u));
    Real term = 0;
    if (variant == VisualVariant::mse) {
      for (std::size_t p = 0; p < hw; ++p) {
        const Real diff = sl[p] - sh[p];
        term += diff * diff;
        gl[p] = 2 * diff * inv_n;
        gh[p] = -2 * diff * inv_n;
      }
    } else {
      term = iou_penalty<Real>(sl, sh, gl, gh, sig);
      for (std::size_t p = 0; p < hw; ++p) {
        gl[p] *= inv_n;
        gh[p] *= inv_n;
      }
    }
    total += term;
    if (grad_low) {
      saliency_backward<Real>(x, hw, d, pre_l, sl, nl, gl, gw_low);
      saliency_backward<Real>(x, hw, d, pre_h, sh, nh, gh, gw_high);
    }
  }
  if (signature) *signature = sig;
  if (grad_low) {
    *grad_low = Tensor(w_low.shape());
    *grad_high = Tensor(w_high.shape());
    for (std::size_t r = 0; r < w_low.dim(0); ++r)
      for (std::size_t c = 0; c < d; ++c) (*grad_low)(r, c) = static_cast<double>(gw_low[c]);
    for (std::size_t r = 0; r < w_high.dim(0); ++r)
      for (std::size_t c = 0; c < d; ++c) (*grad_high)(r, c) = static_cast<double>(gw_high[c]);
  }
  return total * inv_n;
}

}  // namespace detail

/// Mean over the batch of the discrepancy between the two levels' saliency
/// maps: ||S_l - S_h||^2 (mse) or the soft-IoU penalty (iou).
/// `features` is [B x H x W x D]; weights are [n x D] and [m x D].
inline LossValue visual_loss(const Tensor& features, const Tensor& w_low, const Tensor& w_high,
                             VisualVariant variant = VisualVariant::mse) {
  LossValue out;
  Tensor gl, gh;
  out.value = detail::visual<double>(features, w_low, w_high, variant, &gl, &gh, &out.branch_signature);
  out.grads.emplace("W_low", std::move(gl));
  out.grads.emplace("W_high", std::move(gh));
  return out;
}

template <class Real>
Real visual_value(const Tensor& features, const Tensor& w_low, const Tensor& w_high,
                  VisualVariant variant = VisualVariant::mse, std::uint64_t* signature = nullptr) {
  return detail::visual<Real>(features, w_low, w_high, variant, nullptr, nullptr, signature);
}

// ---------------------------------------------------------------------------
// Classification losses

namespace detail {

inline void validate_path_target(const PathTarget& target, std::size_t kl, std::size_t kh) {
  require(kl > 0 && kh > 0, ErrorKind::shape_mismatch, "tree_path_kl: empty logits");
  require(target.vector.size() == kl + kh, ErrorKind::shape_mismatch,
          "tree_path_kl: target length " + std::to_string(target.vector.size()) + " vs logits " +
              std::to_string(kl + kh));
  double ones = 0.0;
  for (std::size_t i = 0; i < target.vector.size(); ++i) {
    const double v = target.vector[i];
    require(v == 0.0 || v == 1.0, ErrorKind::invalid_argument, "tree_path_kl: target is not binary");
    ones += v;
  }
  require(ones == 2.0 && target.low < kl && target.high < kh && target.vector[target.low] == 1.0 &&
              target.vector[kl + target.high] == 1.0,
          ErrorKind::invalid_argument, "tree_path_kl: target must mark exactly one class per level");
}

template <class Real>
Real tree_path(std::span<const double> logits_low, std::span<const double> logits_high, const PathTarget& target,
               Tensor* grad_low, Tensor* grad_high) {
  const std::size_t kl = logits_low.size(), kh = logits_high.size();
  validate_path_target(target, kl, kh);
  std::vector<double> z(logits_low.begin(), logits_low.end());
  z.insert(z.end(), logits_high.begin(), logits_high.end());
  const Real lse = log_sum_exp<Real>(z);
  if (grad_low) {
    *grad_low = Tensor::vector(kl);
    *grad_high = Tensor::vector(kh);
    for (std::size_t i = 0; i < kl; ++i) (*grad_low)[i] = static_cast<double>(2 * std::exp(z[i] - lse));
    for (std::size_t i = 0; i < kh; ++i) (*grad_high)[i] = static_cast<double>(2 * std::exp(z[kl + i] - lse));
    (*grad_low)[target.low] -= 1.0;
    (*grad_high)[target.high] -= 1.0;
  }
  return (lse - z[target.low]) + (lse - z[kl + target.high]);
}

template <class Real>
Real cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* grad) {
  require_rank(logits, 2, "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  require(labels.size() == n && n > 0, ErrorKind::size_mismatch, "cross_entropy: label count differs from rows");
  if (grad) *grad = Tensor(logits.shape());
  const Real inv_n = Real(1) / static_cast<Real>(n);
  Real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] < k, ErrorKind::out_of_range,
            "cross_entropy: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(k) + ")");
    auto z = logits.row(i);
    const Real lse = log_sum_exp<Real>(z);
    total += lse - z[labels[i]];
    if (grad) {
      for (std::size_t c = 0; c < k; ++c) (*grad)(i, c) = static_cast<double>(std::exp(z[c] - lse) * inv_n);
      (*grad)(i, labels[i]) -= static_cast<double>(inv_n);
    }
  }
  return total * inv_n;
}

}  // namespace detail

/// KL([Y_low; Y_high] || log_softmax([z_low; z_high])). With a binary path
/// target this is -Yhat[low] - Yhat[K_L + high].
inline LossValue tree_path_kl(std::span<const double> logits_low, std::span<const double> logits_high,
                              const PathTarget& target) {
  LossValue out;
  Tensor gl, gh;
  out.value = detail::tree_path<double>(logits_low, logits_high, target, &gl, &gh);
  out.grads.emplace("logits_low", std::move(gl));
  out.grads.emplace("logits_high", std::move(gh));
  return out;
}

template <class Real>
Real tree_path_kl_value(std::span<const double> logits_low, std::span<const double> logits_high,
                        const PathTarget& target) {
  return detail::tree_path<Real>(logits_low, logits_high, target, nullptr, nullptr);
}

/// Batch mean of tree_path_kl with targets derived from the low labels.
inline LossValue tree_path_kl_batch(const Tensor& logits_low, const Tensor& logits_high,
                                    std::span<const std::size_t> low_labels, const Taxonomy& tax) {
  require_rank(logits_low, 2, "low logits");
  require_rank(logits_high, 2, "high logits");
  const std::size_t n = logits_low.dim(0);
  require(logits_high.dim(0) == n && low_labels.size() == n && n > 0, ErrorKind::size_mismatch,
          "tree_path_kl_batch: batch sizes differ");
  require(logits_low.dim(1) == tax.low_count() && logits_high.dim(1) == tax.high_count(), ErrorKind::shape_mismatch,
          "tree_path_kl_batch: logits do not match the taxonomy");
  LossValue out;
  Tensor gl(logits_low.shape()), gh(logits_high.shape()), a, b;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.value += detail::tree_path<double>(logits_low.row(i), logits_high.row(i),
                                           tree_path_target(low_labels[i], tax), &a, &b);
    for (std::size_t k = 0; k < a.size(); ++k) gl(i, k) = a[k] * inv_n;
    for (std::size_t k = 0; k < b.size(); ++k) gh(i, k) = b[k] * inv_n;
  }
  out.value *= inv_n;
  out.grads.emplace("logits_low", std::move(gl));
  out.grads.emplace("logits_high", std::move(gh));
  return out;
}

/// Mean negative log-softmax at the true labels; gradient (softmax - onehot)/N.
inline LossValue cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  LossValue out;
  Tensor g;
  out.value = detail::cross_entropy<double>(logits, labels, &g);
  out.grads.emplace("logits", std::move(g));
  return out;
}

template <class Real>
Real cross_entropy_value(const Tensor& logits, std::span<const std::size_t> labels) {
  return detail::cross_entropy<Real>(logits, labels, nullptr);
}

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// R_alpha(W) = (1 - alpha) * 0.5 * ||W||_F^2 + alpha * ||W||_1,1 with sign(0) = 0.
inline LossValue elastic_net_penalty(const Tensor& w, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument,
          "alpha must lie in [0,1], got " + text::format_double(alpha));
  double sq = 0.0, l1 = 0.0;
  Tensor g(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    sq += w[i] * w[i];
    l1 += std::abs(w[i]);
    g[i] = (1.0 - alpha) * w[i] + alpha * sign0(w[i]);
  }
  LossValue out;
  out.value = (1.0 - alpha) * 0.5 * sq + alpha * l1;
  out.grads.emplace("W", std::move(g));
  return out;
}

// ---------------------------------------------------------------------------
// Stage-1 objective

struct Stage1Batch {
  Tensor features;  ///< [B x H x W x D], or [B x D] when the visual term is off
  Tensor p_low;     ///< [B x n]
  Tensor p_high;    ///< [B x m]
};

/// L_HCBL = L_CBL + lambda_vis * L_vis, gradients w.r.t. both concept layers.
inline LossValue total_stage1_loss(const Stage1Batch& batch, const Tensor& w_low, const Tensor& w_high,
                                   double lambda_vis, VisualVariant variant = VisualVariant::mse) {
  require(lambda_vis >= 0.0, ErrorKind::invalid_argument, "lambda_vis must be >= 0");
  const Tensor pooled = pool_features(batch.features);
  const Tensor q_low = matmul_transposed(pooled, w_low);
  const Tensor q_high = matmul_transposed(pooled, w_high);
  LossValue cbl = cbl_loss(q_low, batch.p_low, q_high, batch.p_high);

  // dL/dW = dL/dQ^T * pooled
  auto back = [&pooled](const Tensor& gq, const Tensor& w) {
    Tensor gw(w.shape());
    for (std::size_t i = 0; i < pooled.dim(0); ++i)
      for (std::size_t r = 0; r < w.dim(0); ++r) {
        const double g = gq(i, r);
        for (std::size_t c = 0; c < w.dim(1); ++c) gw(r, c) += g * pooled(i, c);
      }
    return gw;
  };

  LossValue out;
  out.value = cbl.value;
  out.components["cbl"] = cbl.value;
  out.components["vis"] = 0.0;
  Tensor gl = back(cbl.grads.at("Q_low"), w_low);
  Tensor gh = back(cbl.grads.at("Q_high"), w_high);
  if (lambda_vis > 0.0) {
    const LossValue vis = visual_loss(batch.features, w_low, w_high, variant);
    out.value = cbl.value + lambda_vis * vis.value;
    out.components["vis"] = vis.value;
    out.branch_signature = vis.branch_signature;
    const auto& vl = vis.grads.at("W_low");
    const auto& vh = vis.grads.at("W_high");
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += lambda_vis * vl[i];
    for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += lambda_vis * vh[i];
  }
  out.grads.emplace("W_low", std::move(gl));
  out.grads.emplace("W_high", std::move(gh));
  return out;
}

}  // namespace hilcbm
