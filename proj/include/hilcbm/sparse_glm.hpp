#pragma once

// Elastic-net multinomial logistic regression heads fitted with a SAGA-style
// variance-reduced proximal stochastic gradient method.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/objectives.hpp"
#include "hilcbm/rng.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

struct SparseHead {
  Tensor weight;                        ///< [K x C] classes x concepts
  Tensor bias;                          ///< [K]
  std::vector<std::uint8_t> zero_mask;  ///< 1 where weight was exactly zero after the sparse fit
  double lambda = 0.0;
  double alpha = 0.99;

  std::size_t classes() const { return weight.dim(0); }
  std::size_t concepts() const { return weight.dim(1); }

  /// Recomputes the mask from the current zero pattern.
  void refresh_mask() {
    zero_mask.assign(weight.size(), 0);
    for (std::size_t i = 0; i < weight.size(); ++i) zero_mask[i] = weight[i] == 0.0 ? 1 : 0;
  }

  double sparsity() const {
    if (weight.size() == 0) return 0.0;
    std::size_t zeros = 0;
    for (double w : weight.values()) zeros += w == 0.0;
    return static_cast<double>(zeros) / static_cast<double>(weight.size());
  }

  friend bool operator==(const SparseHead&, const SparseHead&) = default;
};

struct FitDiagnostics {
  std::size_t epochs = 0;
  double objective = 0.0;
  double kkt_residual = 0.0;
  double sparsity = 0.0;
  double step_size = 0.0;
  std::size_t rejected_epochs = 0;
  bool converged = false;
};

struct GlmConfig {
  std::size_t max_epochs = 20000;
  double tolerance = 1e-6;  ///< KKT residual at which the fit stops
  std::uint64_t seed = 7;
};

/// argmin_z (z - w)^2 / (2 step) + lambda * R_alpha(z)
///   = soft(w, step * lambda * alpha) / (1 + step * lambda * (1 - alpha))
inline double prox_elastic_net(double w, double step, double lambda, double alpha) {
  require(step > 0.0, ErrorKind::invalid_argument, "prox step must be positive");
  const double t = step * lambda * alpha;
  const double soft = w > t ? w - t : (w < -t ? w + t : 0.0);
  return soft / (1.0 + step * lambda * (1.0 - alpha));
}

/// [N x K] logits W x + b.
inline Tensor head_logits(const SparseHead& head, const Tensor& x) {
  Tensor z = matmul_transposed(x, head.weight);
  for (std::size_t i = 0; i < z.dim(0); ++i)
    for (std::size_t k = 0; k < z.dim(1); ++k) z(i, k) += head.bias[k];
  return z;
}

/// Lowest index among maxima.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::vector<std::size_t> predict_classes(const SparseHead& head, const Tensor& x) {
  const Tensor z = head_logits(head, x);
  std::vector<std::size_t> out(z.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(z.row(i));
  return out;
}

/// Mean cross-entropy + lambda * R_alpha(W). The bias is never penalised.
inline double glm_objective(const SparseHead& head, const Tensor& x, std::span<const std::size_t> labels) {
  return cross_entropy(head_logits(head, x), labels).value + head.lambda * elastic_net_penalty(head.weight, head.alpha).value;
}

struct CeGradient {
  Tensor weight;
  Tensor bias;
};

inline CeGradient ce_gradient(const SparseHead& head, const Tensor& x, std::span<const std::size_t> labels) {
  const Tensor gz = cross_entropy(head_logits(head, x), labels).grads.at("logits");
  CeGradient g{Tensor(head.weight.shape()), Tensor(head.bias.shape())};
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t k = 0; k < head.classes(); ++k) {
      const double r = gz(i, k);
      g.bias[k] += r;
      for (std::size_t c = 0; c < head.concepts(); ++c) g.weight(k, c) += r * x(i, c);
    }
  return g;
}

/// Distance from satisfying the elastic-net optimality conditions: for
/// w != 0, |g + lambda(1-alpha) w + lambda alpha sign(w)|; for w == 0,
/// max(0, |g| - lambda alpha); for the bias, |g_b|. Zero exactly at the optimum.
inline double kkt_residual(const SparseHead& head, const Tensor& x, std::span<const std::size_t> labels) {
  const CeGradient g = ce_gradient(head, x, labels);
  const double l2 = head.lambda * (1.0 - head.alpha), l1 = head.lambda * head.alpha;
  double r = 0.0;
  for (std::size_t i = 0; i < head.weight.size(); ++i) {
    const double w = head.weight[i];
    r = std::max(r, w != 0.0 ? std::abs(g.weight[i] + l2 * w + l1 * sign0(w)) : std::max(0.0, std::abs(g.weight[i]) - l1));
  }
  for (std::size_t k = 0; k < g.bias.size(); ++k) r = std::max(r, std::abs(g.bias[k]));
  return r;
}

struct FitResult {
  SparseHead head;
  FitDiagnostics diagnostics;
};

/// Fits W, b minimising mean CE + lambda * R_alpha(W) on standardized
/// activations. Epochs whose objective rises are rolled back and the step
/// halved, so the accepted objective sequence never increases.
inline FitResult fit_sparse_head(const Tensor& x, std::span<const std::size_t> labels, std::size_t classes,
                                 double lambda, double alpha, const GlmConfig& config = {}) {
  require_rank(x, 2, "activations");
  const std::size_t n = x.dim(0), c = x.dim(1), k = classes;
  require(labels.size() == n, ErrorKind::size_mismatch, "label count differs from activation rows");
  require(k >= 1 && n >= k, ErrorKind::invalid_argument, "need at least as many samples as classes");
  require(lambda >= 0.0, ErrorKind::invalid_argument, "lambda must be >= 0");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument, "alpha must lie in [0,1]");
  for (std::size_t i = 0; i < n; ++i)
    require(labels[i] < k, ErrorKind::out_of_range, "label " + std::to_string(labels[i]) + " outside [0," + std::to_string(k) + ")");
  require(x.all_finite(), ErrorKind::non_finite, "activations contain non-finite values");

  FitResult res;
  SparseHead& head = res.head;
  head.weight = Tensor::matrix(k, c);
  head.bias = Tensor::vector(k);
  head.lambda = lambda;
  head.alpha = alpha;

  double max_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 1.0;
    for (std::size_t j = 0; j < c; ++j) sq += x(i, j) * x(i, j);
    max_sq = std::max(max_sq, sq);
  }
  const double lipschitz = 0.5 * max_sq;
  double step = 1.0 / (2.0 * lipschitz);

  // Per-sample residual table (softmax - onehot) and its running averages.
  struct State {
    Tensor weight, bias, table, avg_w, avg_b;
  };
  State s{head.weight, head.bias, Tensor::matrix(n, k), Tensor::matrix(k, c), Tensor::vector(k)};
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> z(k);
  auto residual = [&](std::size_t i, std::vector<double>& out) {
    for (std::size_t a = 0; a < k; ++a) {
      double v = s.bias[a];
      for (std::size_t j = 0; j < c; ++j) v += s.weight(a, j) * x(i, j);
      z[a] = v;
    }
    const double lse = detail::log_sum_exp<double>(z);
    out.resize(k);
    for (std::size_t a = 0; a < k; ++a) out[a] = std::exp(z[a] - lse);
    out[labels[i]] -= 1.0;
  };
  std::vector<double> g(k), delta(k);
  for (std::size_t i = 0; i < n; ++i) {
    residual(i, g);
    for (std::size_t a = 0; a < k; ++a) {
      s.table(i, a) = g[a];
      s.avg_b[a] += g[a] * inv_n;
      for (std::size_t j = 0; j < c; ++j) s.avg_w(a, j) += g[a] * x(i, j) * inv_n;
    }
  }

  CounterRng rng(config.seed, 0x5A6A);
  auto objective_of = [&](const State& st) {
    SparseHead probe{st.weight, st.bias, {}, lambda, alpha};
    return glm_objective(probe, x, labels);
  };
  double objective = objective_of(s);
  auto& diag = res.diagnostics;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    head.weight = s.weight;
    head.bias = s.bias;
    diag.kkt_residual = kkt_residual(head, x, labels);
    if (diag.kkt_residual <= config.tolerance) {
      diag.converged = true;
      break;
    }
    const State snapshot = s;
    for (std::size_t i : permutation(n, rng)) {
      residual(i, g);
      for (std::size_t a = 0; a < k; ++a) delta[a] = g[a] - s.table(i, a);
      for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t j = 0; j < c; ++j) {
          const double grad = delta[a] * x(i, j) + s.avg_w(a, j);
          s.weight(a, j) = prox_elastic_net(s.weight(a, j) - step * grad, step, lambda, alpha);
        }
        s.bias[a] -= step * (delta[a] + s.avg_b[a]);
      }
      for (std::size_t a = 0; a < k; ++a) {
        s.table(i, a) = g[a];
        s.avg_b[a] += delta[a] * inv_n;
        for (std::size_t j = 0; j < c; ++j) s.avg_w(a, j) += delta[a] * x(i, j) * inv_n;
      }
    }
    const double next = objective_of(s);
    require(std::isfinite(next), ErrorKind::divergence, "non-finite GLM objective at epoch " + std::to_string(epoch));
    if (next > objective + 1e-12) {
      s = snapshot;
      step *= 0.5;
      ++diag.rejected_epochs;
    } else {
      objective = next;
    }
    diag.epochs = epoch + 1;
  }
  head.weight = s.weight;
  head.bias = s.bias;
  head.refresh_mask();
  diag.objective = objective;
  diag.kkt_residual = kkt_residual(head, x, labels);
  diag.converged = diag.kkt_residual <= config.tolerance;
  diag.sparsity = head.sparsity();
  diag.step_size = step;
  return res;
}

inline std::string render_diagnostics(const FitDiagnostics& d, std::string_view name) {
  std::string out;
  out += std::string(name) + ".epochs = " + std::to_string(d.epochs) + "\n";
  out += std::string(name) + ".objective = " + text::format_double(d.objective) + "\n";
  out += std::string(name) + ".kkt_residual = " + text::format_double(d.kkt_residual) + "\n";
  out += std::string(name) + ".sparsity = " + text::format_double(d.sparsity) + "\n";
  out += std::string(name) + ".step_size = " + text::format_double(d.step_size) + "\n";
  out += std::string(name) + ".rejected_epochs = " + std::to_string(d.rejected_epochs) + "\n";
  out += std::string(name) + ".converged = " + (d.converged ? "true" : "false") + "\n";
  return out;
}

}  // namespace hilcbm
