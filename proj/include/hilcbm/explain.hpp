#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hilcbm/cbl_trainer.hpp"
#include "hilcbm/dataset.hpp"
#include "hilcbm/error.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/sparse_glm.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/tensor.hpp"

namespace hilcbm {

/// Concept activations of a single sample, raw and standardized, both levels.
struct ConceptVector {
  std::vector<double> raw_low, raw_high;
  std::vector<double> std_low, std_high;

  const std::vector<double>& raw(Level l) const { return l == Level::low ? raw_low : raw_high; }
  const std::vector<double>& standardized(Level l) const { return l == Level::low ? std_low : std_high; }
  std::vector<double>& standardized(Level l) { return l == Level::low ? std_low : std_high; }
};

/// Wraps one sample ([H x W x D] or [D]) as a batch of one.
inline Tensor as_batch(const Tensor& sample) {
  Shape s{1};
  s.insert(s.end(), sample.shape().begin(), sample.shape().end());
  return Tensor(s, std::vector<double>(sample.values().begin(), sample.values().end()));
}

/// Row i of a bundle's feature tensor, keeping its spatial layout.
inline Tensor sample_features(const DatasetBundle& bundle, std::size_t i) {
  require(i < bundle.size(), ErrorKind::out_of_range, "sample index " + std::to_string(i) + " out of range");
  Shape s(bundle.features.shape().begin() + 1, bundle.features.shape().end());
  const auto row = bundle.features.row(i);
  return Tensor(s, std::vector<double>(row.begin(), row.end()));
}

inline Tensor standardized_concepts(const HilModel& model, const Tensor& features, Level level) {
  return standardize(concept_activations(features, model.layers, level), model.layers.stats(level));
}

inline ConceptVector concept_vector(const HilModel& model, const Tensor& sample) {
  const Tensor batch = sample.rank() == 1 || sample.rank() == 3 ? as_batch(sample) : sample;
  require(batch.dim(0) == 1, ErrorKind::shape_mismatch, "expected a single sample, got " + shape_string(sample.shape()));
  ConceptVector cv;
  for (Level level : {Level::low, Level::high}) {
    const Tensor raw = concept_activations(batch, model.layers, level);
    const Tensor z = standardize(raw, model.layers.stats(level));
    (level == Level::low ? cv.raw_low : cv.raw_high).assign(raw.values().begin(), raw.values().end());
    cv.standardized(level).assign(z.values().begin(), z.values().end());
  }
  return cv;
}

struct ClassScore {
  std::size_t id = 0;
  std::string name;
  double probability = 0.0;

  friend bool operator==(const ClassScore&, const ClassScore&) = default;
};

struct HierPrediction {
  ClassScore low, high;
  std::vector<double> logits_low, logits_high;
  std::vector<double> probs_low, probs_high;
  bool consistent = false;
  std::optional<std::size_t> mask_high;  ///< set when the low level was restricted to one high class

  const ClassScore& at(Level l) const { return l == Level::low ? low : high; }
  const std::vector<double>& logits(Level l) const { return l == Level::low ? logits_low : logits_high; }
  const std::vector<double>& probs(Level l) const { return l == Level::low ? probs_low : probs_high; }

  friend bool operator==(const HierPrediction&, const HierPrediction&) = default;
};

inline std::vector<double> logits_of(const SparseHead& head, std::span<const double> x) {
  require(x.size() == head.concepts(), ErrorKind::shape_mismatch,
          "head expects " + std::to_string(head.concepts()) + " concepts, got " + std::to_string(x.size()));
  std::vector<double> z(head.classes());
  for (std::size_t k = 0; k < z.size(); ++k) {
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) acc += x[c] * head.weight(k, c);
    z[k] = acc + head.bias[k];
  }
  return z;
}

/// Softmax over the allowed entries only; the rest get probability 0.
inline std::vector<double> masked_softmax(std::span<const double> z, std::span<const std::size_t> allowed) {
  std::vector<double> p(z.size(), 0.0);
  double mx = -INFINITY;
  for (auto k : allowed) mx = std::max(mx, z[k]);
  double sum = 0.0;
  for (auto k : allowed) sum += (p[k] = std::exp(z[k] - mx));
  for (auto k : allowed) p[k] /= sum;
  return p;
}

inline std::vector<std::size_t> all_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

/// Prediction from standardized concepts through explicit heads, optionally
/// restricting the low level to the children of one high class.
inline HierPrediction predict_with(const SparseHead& low, const SparseHead& high, const ConceptVector& cv,
                                   const Taxonomy& tax, std::optional<std::size_t> mask_high = std::nullopt) {
  HierPrediction p;
  p.logits_low = logits_of(low, cv.std_low);
  p.logits_high = logits_of(high, cv.std_high);
  const auto high_ids = all_ids(p.logits_high.size());
  p.probs_high = masked_softmax(p.logits_high, high_ids);
  const auto low_ids = mask_high ? classes_under(*mask_high, tax) : all_ids(p.logits_low.size());
  p.probs_low = masked_softmax(p.logits_low, low_ids);
  p.mask_high = mask_high;

  std::size_t best_low = low_ids.front();
  for (auto k : low_ids)
    if (p.logits_low[k] > p.logits_low[best_low]) best_low = k;
  const std::size_t best_high = argmax(p.logits_high);
  p.low = {best_low, tax.low_names()[best_low], p.probs_low[best_low]};
  p.high = {best_high, tax.high_names()[best_high], p.probs_high[best_high]};
  p.consistent = tax.parent(best_low) == best_high;
  return p;
}

inline HierPrediction predict_hier(const HilModel& model, const Tensor& sample) {
  require_complete(model);
  return predict_with(*model.head_low, *model.head_high, concept_vector(model, sample), model.taxonomy);
}

struct Contribution {
  std::size_t concept_id = 0;
  std::string name;
  double activation = 0.0;    ///< raw concept activation
  double standardized = 0.0;  ///< the head's input
  double weight = 0.0;
  double contribution = 0.0;  ///< weight * standardized

  friend bool operator==(const Contribution&, const Contribution&) = default;
};

struct LevelExplanation {
  Level level = Level::low;
  std::size_t class_id = 0;
  std::string class_name;
  double probability = 0.0;
  double logit = 0.0;
  double bias = 0.0;
  std::vector<Contribution> top;  ///< top-k by |contribution|, ties by concept index
  std::vector<Contribution> all;  ///< every nonzero-weight term, in concept order
  double residual = 0.0;          ///< logit - (bias + sum of all contributions)

  friend bool operator==(const LevelExplanation&, const LevelExplanation&) = default;
};

struct HierExplanation {
  HierPrediction prediction;
  LevelExplanation high, low;

  const LevelExplanation& at(Level l) const { return l == Level::low ? low : high; }
};

/// Additive decomposition of one class's logit. Concepts whose weight is
/// exactly zero contribute nothing and are left out.
inline LevelExplanation explain_class(const SparseHead& head, const ConceptVector& cv, Level level, std::size_t class_id,
                                      std::size_t k, const ConceptSet& concepts, const Taxonomy& tax) {
  require(class_id < head.classes(), ErrorKind::out_of_range,
          std::string(to_string(level)) + " class " + std::to_string(class_id) + " out of range");
  require(k >= 1 && k <= head.concepts(), ErrorKind::invalid_argument,
          "k must lie in [1," + std::to_string(head.concepts()) + "], got " + std::to_string(k));
  const auto& x = cv.standardized(level);
  const auto& raw = cv.raw(level);
  LevelExplanation e;
  e.level = level;
  e.class_id = class_id;
  e.class_name = tax.names(level)[class_id];
  e.bias = head.bias[class_id];
  const auto z = logits_of(head, x);
  e.logit = z[class_id];
  e.probability = masked_softmax(z, all_ids(z.size()))[class_id];
  double sum = e.bias;
  for (std::size_t c = 0; c < head.concepts(); ++c) {
    const double w = head.weight(class_id, c);
    if (w == 0.0) continue;
    e.all.push_back({c, concepts.names[c], raw[c], x[c], w, w * x[c]});
    sum += w * x[c];
  }
  e.residual = e.logit - sum;
  e.top = e.all;
  std::stable_sort(e.top.begin(), e.top.end(), [](const Contribution& a, const Contribution& b) {
    return std::fabs(a.contribution) > std::fabs(b.contribution);
  });
  if (e.top.size() > k) e.top.resize(k);
  return e;
}

struct ExplainRequest {
  std::size_t k = 3;
  std::optional<std::size_t> class_low;   ///< explain this class instead of the prediction
  std::optional<std::size_t> class_high;
};

inline HierExplanation explain_with(const SparseHead& low, const SparseHead& high, const ConceptVector& cv,
                                    const HilModel& model, const ExplainRequest& req,
                                    std::optional<std::size_t> mask_high = std::nullopt) {
  HierExplanation ex;
  ex.prediction = predict_with(low, high, cv, model.taxonomy, mask_high);
  ex.high = explain_class(high, cv, Level::high, req.class_high.value_or(ex.prediction.high.id), req.k, model.bank.high,
                          model.taxonomy);
  ex.low = explain_class(low, cv, Level::low, req.class_low.value_or(ex.prediction.low.id), req.k, model.bank.low,
                         model.taxonomy);
  // Under a mask the low probability is the renormalised one.
  ex.low.probability = ex.prediction.probs_low[ex.low.class_id];
  return ex;
}

inline HierExplanation explain_hier(const HilModel& model, const Tensor& sample, const ExplainRequest& req = {}) {
  require_complete(model);
  return explain_with(*model.head_low, *model.head_high, concept_vector(model, sample), model, req);
}

inline std::string format_signed(double v, int precision = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.*f", precision, v);
  return buf;
}

inline std::string render_level(const LevelExplanation& e) {
  char p[32];
  std::snprintf(p, sizeof p, "%.3f", e.probability);
  std::string out = std::string(e.level == Level::high ? "HIGH" : "LOW") + ": " + e.class_name + " (p=" + p + ") because:";
  if (e.top.empty()) return out + " bias only (" + format_signed(e.bias) + ")";
  for (std::size_t i = 0; i < e.top.size(); ++i)
    out += (i ? ", " : " ") + e.top[i].name + " (" + format_signed(e.top[i].contribution) + ")";
  return out;
}

/// General to specific: the high level first, then the low level.
inline std::string render_explanation(const HierExplanation& ex) {
  return render_level(ex.high) + "; " + render_level(ex.low);
}

struct Metrics {
  std::size_t samples = 0;
  double acc_low = 0.0;
  double acc_high = 0.0;
  double model_consistency = 0.0;
  double ground_truth_consistency = 0.0;
  double sparsity_low = 0.0;
  double sparsity_high = 0.0;
  double concepts_per_class_low = 0.0;  ///< mean nonzero weights per class row
  double concepts_per_class_high = 0.0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline double concepts_per_class(const SparseHead& head) {
  std::size_t nz = 0;
  for (double w : head.weight.values()) nz += w != 0.0;
  return static_cast<double>(nz) / static_cast<double>(head.classes());
}

/// Accuracy and consistency from predicted ids alone.
inline Metrics prediction_metrics(std::span<const std::size_t> pred_low, std::span<const std::size_t> pred_high,
                                  std::span<const std::size_t> true_low, std::span<const std::size_t> true_high,
                                  const Taxonomy& tax) {
  require(!pred_low.empty(), ErrorKind::invalid_argument, "cannot evaluate an empty bundle");
  require(pred_low.size() == true_low.size() && pred_high.size() == true_high.size() &&
              pred_low.size() == pred_high.size(),
          ErrorKind::size_mismatch, "prediction and label counts differ");
  Metrics m;
  m.samples = pred_low.size();
  std::size_t ok_low = 0, ok_high = 0;
  for (std::size_t i = 0; i < m.samples; ++i) {
    ok_low += pred_low[i] == true_low[i];
    ok_high += pred_high[i] == true_high[i];
  }
  m.acc_low = static_cast<double>(ok_low) / static_cast<double>(m.samples);
  m.acc_high = static_cast<double>(ok_high) / static_cast<double>(m.samples);
  const auto c = consistency_metrics(pred_low, pred_high, true_high, tax);
  m.model_consistency = c.model_consistency;
  m.ground_truth_consistency = c.ground_truth_consistency;
  return m;
}

struct EvalReport {
  Metrics metrics;
  std::vector<std::size_t> pred_low, pred_high;
};

inline EvalReport evaluate_model(const HilModel& model, const DatasetBundle& bundle) {
  require_complete(model);
  require(bundle.size() > 0, ErrorKind::invalid_argument, "cannot evaluate an empty bundle");
  EvalReport r;
  r.pred_low = predict_classes(*model.head_low, standardized_concepts(model, bundle.features, Level::low));
  r.pred_high = predict_classes(*model.head_high, standardized_concepts(model, bundle.features, Level::high));
  r.metrics = prediction_metrics(r.pred_low, r.pred_high, bundle.low_labels, bundle.high_labels, model.taxonomy);
  r.metrics.sparsity_low = model.head_low->sparsity();
  r.metrics.sparsity_high = model.head_high->sparsity();
  r.metrics.concepts_per_class_low = concepts_per_class(*model.head_low);
  r.metrics.concepts_per_class_high = concepts_per_class(*model.head_high);
  return r;
}

inline std::string render_metrics(const Metrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "samples            %zu\n"
                "accuracy           %.4f || %.4f   (low || high)\n"
                "model consistency  %.4f\n"
                "gt consistency     %.4f\n"
                "sparsity           %.4f || %.4f\n"
                "concepts/class     %.2f || %.2f\n",
                m.samples, m.acc_low, m.acc_high, m.model_consistency, m.ground_truth_consistency, m.sparsity_low,
                m.sparsity_high, m.concepts_per_class_low, m.concepts_per_class_high);
  return buf;
}

}  // namespace hilcbm
