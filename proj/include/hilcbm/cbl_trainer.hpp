#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hilcbm/concept_bank.hpp"
#include "hilcbm/dataset.hpp"
#include "hilcbm/error.hpp"
#include "hilcbm/objectives.hpp"
#include "hilcbm/optim.hpp"
#include "hilcbm/rng.hpp"
#include "hilcbm/tensor.hpp"

namespace hilcbm {

/// Per-concept mean and population std of activations over the training set.
struct ActStats {
  std::vector<double> mean;
  std::vector<double> std;

  friend bool operator==(const ActStats&, const ActStats&) = default;
};

/// Bias-free projections from mean-pooled backbone features to concepts.
struct ConceptLayers {
  Tensor w_low;   ///< [n x D]
  Tensor w_high;  ///< [m x D]
  ActStats stats_low;
  ActStats stats_high;

  const Tensor& weights(Level level) const { return level == Level::low ? w_low : w_high; }
  const ActStats& stats(Level level) const { return level == Level::low ? stats_low : stats_high; }

  friend bool operator==(const ConceptLayers&, const ConceptLayers&) = default;
};

struct TrainConfig {
  double lambda_vis = 0.7;
  std::size_t steps = 1000;
  std::size_t batch_size = 64;
  AdamConfig optimizer{};
  std::uint64_t seed = 7;
  VisualVariant visual_variant = VisualVariant::mse;
};

struct Stage1TraceRow {
  std::size_t step = 0;
  double cbl = 0.0;
  double vis = 0.0;
  double total = 0.0;
};

/// Passed to the step hook before the update is applied.
struct Stage1Step {
  std::size_t step;
  const std::vector<std::size_t>& batch;
  const Tensor& w_low;
  const Tensor& w_high;
  const LossValue& loss;
};

struct Stage1Result {
  ConceptLayers layers;
  std::vector<Stage1TraceRow> trace;
};

/// c = W * pooled(A) for every sample: [N x concepts].
inline Tensor concept_activations(const Tensor& features, const ConceptLayers& layers, Level level) {
  const Tensor pooled = pool_features(features);
  const Tensor& w = layers.weights(level);
  require(pooled.dim(1) == w.dim(1), ErrorKind::shape_mismatch,
          "pooled feature width " + std::to_string(pooled.dim(1)) + " vs concept layer width " + std::to_string(w.dim(1)));
  return matmul_transposed(pooled, w);
}

inline ActStats activation_stats(const Tensor& activations, const ConceptSet* names = nullptr) {
  require_rank(activations, 2, "activations");
  const std::size_t n = activations.dim(0), k = activations.dim(1);
  require(n > 0, ErrorKind::invalid_argument, "activation statistics of an empty set");
  ActStats s{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
  for (std::size_t j = 0; j < k; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += activations(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (activations(i, j) - mean) * (activations(i, j) - mean);
    s.mean[j] = mean;
    s.std[j] = std::sqrt(var / static_cast<double>(n));
    require(s.std[j] > 1e-12 * (1.0 + std::abs(mean)), ErrorKind::zero_variance,
            "concept " + std::to_string(j) + (names ? " ('" + names->names.at(j) + "')" : std::string()) +
                " has zero activation variance");
  }
  return s;
}

/// (a - mean) / std per concept column.
inline Tensor standardize(const Tensor& activations, const ActStats& stats) {
  require_rank(activations, 2, "activations");
  require(activations.dim(1) == stats.mean.size() && stats.std.size() == stats.mean.size(), ErrorKind::shape_mismatch,
          "activation width does not match statistics");
  for (std::size_t j = 0; j < stats.std.size(); ++j)
    require(stats.std[j] > 0.0, ErrorKind::zero_variance, "concept " + std::to_string(j) + " has zero std");
  Tensor out(activations.shape());
  for (std::size_t i = 0; i < activations.dim(0); ++i)
    for (std::size_t j = 0; j < activations.dim(1); ++j)
      out(i, j) = (activations(i, j) - stats.mean[j]) / stats.std[j];
  return out;
}

/// Mean ||S_l - S_h||^2 over the samples: the visual-consistency metric.
inline double mean_saliency_mse(const Tensor& features, const ConceptLayers& layers) {
  return visual_loss(features, layers.w_low, layers.w_high, VisualVariant::mse).value;
}

inline Stage1Batch make_stage1_batch(const DatasetBundle& b, const std::vector<std::size_t>& idx) {
  return Stage1Batch{gather_rows(b.features, idx), gather_rows(b.p_low, idx), gather_rows(b.p_high, idx)};
}

/// Jointly fits both concept layers to minimise L_CBL + lambda_vis * L_vis
/// with Adam over a shared mini-batch stream.
inline Stage1Result train_concept_layers(const DatasetBundle& bundle, const ConceptBank& bank, const TrainConfig& config,
                                         const std::function<void(const Stage1Step&)>& on_step = {}) {
  require(config.steps >= 1, ErrorKind::invalid_argument, "steps must be >= 1");
  require(config.batch_size >= 2, ErrorKind::invalid_argument, "batch_size must be >= 2");
  require(config.lambda_vis >= 0.0, ErrorKind::invalid_argument, "lambda_vis must be >= 0");
  require(bundle.p_low.dim(1) == bank.low.size() && bundle.p_high.dim(1) == bank.high.size(), ErrorKind::shape_mismatch,
          "P matrices are not aligned with the concept bank");
  require(config.lambda_vis == 0.0 || bundle.spatial(), ErrorKind::invalid_argument,
          "visual consistency needs spatial [N x H x W x D] features");
  require(bundle.size() >= 2, ErrorKind::invalid_argument, "need at least two training samples");

  const std::size_t d = bundle.features.dim(bundle.features.rank() - 1);
  CounterRng init(config.seed, 0x1A17);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Stage1Result result;
  auto& layers = result.layers;
  layers.w_low = Tensor::matrix(bank.low.size(), d);
  layers.w_high = Tensor::matrix(bank.high.size(), d);
  for (double& v : layers.w_low.values()) v = scale * init.normal();
  for (double& v : layers.w_high.values()) v = scale * init.normal();

  Adam opt_low(layers.w_low.size(), config.optimizer), opt_high(layers.w_high.size(), config.optimizer);
  BatchSampler sampler(bundle.size(), config.batch_size, config.seed);
  result.trace.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next();
    const LossValue loss = total_stage1_loss(make_stage1_batch(bundle, idx), layers.w_low, layers.w_high,
                                             config.lambda_vis, config.visual_variant);
    require(std::isfinite(loss.value), ErrorKind::divergence, "non-finite stage-1 loss at step " + std::to_string(step));
    result.trace.push_back({step, loss.components.at("cbl"), loss.components.at("vis"), loss.value});
    if (on_step) on_step(Stage1Step{step, idx, layers.w_low, layers.w_high, loss});
    opt_low.step(layers.w_low.values(), loss.grads.at("W_low").values());
    opt_high.step(layers.w_high.values(), loss.grads.at("W_high").values());
  }

  layers.stats_low = activation_stats(concept_activations(bundle.features, layers, Level::low), &bank.low);
  layers.stats_high = activation_stats(concept_activations(bundle.features, layers, Level::high), &bank.high);
  return result;
}

inline std::string render_stage1_trace(const std::vector<Stage1TraceRow>& trace) {
  std::string out = "step,cbl,vis,total\n";
  for (const auto& r : trace)
    out += std::to_string(r.step) + "," + text::format_double(r.cbl) + "," + text::format_double(r.vis) + "," +
           text::format_double(r.total) + "\n";
  return out;
}

}  // namespace hilcbm
