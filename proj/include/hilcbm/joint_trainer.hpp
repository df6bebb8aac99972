#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/objectives.hpp"
#include "hilcbm/optim.hpp"
#include "hilcbm/rng.hpp"
#include "hilcbm/sparse_glm.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/text.hpp"
#include "hilcbm/tensor.hpp"

namespace hilcbm {

struct JointConfig {
  double lambda_semantic = 0.1;
  std::size_t steps = 300;
  std::size_t batch_size = 64;
  AdamConfig optimizer{};
  std::uint64_t seed = 7;
};

/// grad * (1 - mask): zero wherever the mask marks a frozen zero weight.
inline Tensor apply_zero_mask(const Tensor& grad, std::span<const std::uint8_t> mask) {
  require(mask.size() == grad.size(), ErrorKind::shape_mismatch,
          "mask has " + std::to_string(mask.size()) + " entries for a gradient of " + std::to_string(grad.size()));
  Tensor out = grad;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = 0.0;
  return out;
}

struct JointTraceRow {
  std::size_t step = 0;
  double ce_low = 0.0;
  double ce_high = 0.0;
  double tk = 0.0;
  double total = 0.0;
};

struct JointObjective {
  JointTraceRow terms;
  Tensor grad_w_low, grad_b_low, grad_w_high, grad_b_high;
};

/// L_total = CE_high + CE_low + lambda_semantic * L_TK on the given rows.
inline JointObjective joint_objective(const SparseHead& low, const SparseHead& high, const Tensor& x_low,
                                      const Tensor& x_high, std::span<const std::size_t> y_low,
                                      std::span<const std::size_t> y_high, const Taxonomy& tax, double lambda_semantic) {
  const Tensor zl = head_logits(low, x_low), zh = head_logits(high, x_high);
  const LossValue ce_l = cross_entropy(zl, y_low);
  const LossValue ce_h = cross_entropy(zh, y_high);
  Tensor gzl = ce_l.grads.at("logits"), gzh = ce_h.grads.at("logits");
  JointObjective out;
  out.terms.ce_low = ce_l.value;
  out.terms.ce_high = ce_h.value;
  out.terms.total = ce_h.value + ce_l.value;
  if (lambda_semantic > 0.0) {
    const LossValue tk = tree_path_kl_batch(zl, zh, y_low, tax);
    out.terms.tk = tk.value;
    out.terms.total += lambda_semantic * tk.value;
    const auto& tl = tk.grads.at("logits_low");
    const auto& th = tk.grads.at("logits_high");
    for (std::size_t i = 0; i < gzl.size(); ++i) gzl[i] += lambda_semantic * tl[i];
    for (std::size_t i = 0; i < gzh.size(); ++i) gzh[i] += lambda_semantic * th[i];
  } else {
    out.terms.tk = tree_path_kl_batch(zl, zh, y_low, tax).value;
  }
  auto back = [](const Tensor& gz, const Tensor& x, Tensor& gw, Tensor& gb, const SparseHead& head) {
    gw = Tensor(head.weight.shape());
    gb = Tensor(head.bias.shape());
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t k = 0; k < gz.dim(1); ++k) {
        gb[k] += gz(i, k);
        for (std::size_t c = 0; c < x.dim(1); ++c) gw(k, c) += gz(i, k) * x(i, c);
      }
  };
  back(gzl, x_low, out.grad_w_low, out.grad_b_low, low);
  back(gzh, x_high, out.grad_w_high, out.grad_b_high, high);
  return out;
}

struct JointStep {
  std::size_t step;
  const std::vector<std::size_t>& batch;
  const SparseHead& low;
  const SparseHead& high;
  const JointTraceRow& terms;
};

struct JointResult {
  SparseHead low;
  SparseHead high;
  std::vector<JointTraceRow> trace;
};

/// Fine-tunes both heads jointly with the concept layers frozen. Weights
/// marked in each head's zero_mask receive no update and stay exactly 0;
/// biases are always free. The masks themselves are carried over unchanged.
inline JointResult joint_train(const SparseHead& low, const SparseHead& high, const Tensor& x_low, const Tensor& x_high,
                               std::span<const std::size_t> y_low, std::span<const std::size_t> y_high,
                               const Taxonomy& tax, const JointConfig& config,
                               const std::function<void(const JointStep&)>& on_step = {}) {
  require(config.lambda_semantic >= 0.0, ErrorKind::invalid_argument, "lambda_semantic must be >= 0");
  require(config.steps >= 1 && config.batch_size >= 1, ErrorKind::invalid_argument, "steps and batch_size must be >= 1");
  const std::size_t n = x_low.dim(0);
  require(x_high.dim(0) == n && y_low.size() == n && y_high.size() == n, ErrorKind::size_mismatch,
          "joint training inputs differ in sample count");
  require(low.classes() == tax.low_count() && high.classes() == tax.high_count(), ErrorKind::shape_mismatch,
          "heads do not match the taxonomy");

  JointResult res{low, high, {}};
  const auto mask_of = [](const SparseHead& h) {
    return h.zero_mask.empty() ? std::vector<std::uint8_t>(h.weight.size(), 0) : h.zero_mask;
  };
  const auto mask_low = mask_of(low), mask_high = mask_of(high);
  Adam opt_wl(low.weight.size(), config.optimizer), opt_bl(low.bias.size(), config.optimizer);
  Adam opt_wh(high.weight.size(), config.optimizer), opt_bh(high.bias.size(), config.optimizer);
  BatchSampler sampler(n, config.batch_size, config.seed);
  std::vector<std::size_t> yl(config.batch_size), yh(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next();
    yl.resize(idx.size());
    yh.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      yl[i] = y_low[idx[i]];
      yh[i] = y_high[idx[i]];
    }
    JointObjective obj = joint_objective(res.low, res.high, gather_rows(x_low, idx), gather_rows(x_high, idx), yl, yh,
                                         tax, config.lambda_semantic);
    require(std::isfinite(obj.terms.total), ErrorKind::divergence, "non-finite joint loss at step " + std::to_string(step));
    obj.terms.step = step;
    res.trace.push_back(obj.terms);
    if (on_step) on_step(JointStep{step, idx, res.low, res.high, res.trace.back()});
    opt_wl.step(res.low.weight.values(), apply_zero_mask(obj.grad_w_low, mask_low).values());
    opt_bl.step(res.low.bias.values(), obj.grad_b_low.values());
    opt_wh.step(res.high.weight.values(), apply_zero_mask(obj.grad_w_high, mask_high).values());
    opt_bh.step(res.high.bias.values(), obj.grad_b_high.values());
  }
  return res;
}

inline std::string render_joint_trace(const std::vector<JointTraceRow>& trace) {
  std::string out = "step,ce_low,ce_high,tk,total\n";
  for (const auto& r : trace)
    out += std::to_string(r.step) + "," + text::format_double(r.ce_low) + "," + text::format_double(r.ce_high) + "," +
           text::format_double(r.tk) + "," + text::format_double(r.total) + "\n";
  return out;
}

}  // namespace hilcbm
