#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hilcbm/cbl_trainer.hpp"
#include "hilcbm/dataset.hpp"
#include "hilcbm/explain.hpp"
#include "hilcbm/joint_trainer.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/sparse_glm.hpp"

namespace hilcbm {

struct PipelineConfig {
  TrainConfig cbl{};
  double lambda = 0.0007;
  double alpha = 0.99;
  GlmConfig glm{};
  JointConfig joint{};
  bool joint_stage = true;

  /// Every stage draws from the one seed.
  void set_seed(std::uint64_t seed) {
    cbl.seed = seed;
    glm.seed = seed;
    joint.seed = seed;
  }

  Hyperparameters hyperparameters() const {
    return {lambda, alpha, cbl.lambda_vis, joint_stage ? joint.lambda_semantic : 0.0, cbl.seed, cbl.visual_variant};
  }
};

struct ConceptStageResult {
  HilModel model;
  std::vector<Stage1TraceRow> trace;
};

/// Stage 1: both concept layers plus their activation statistics.
inline ConceptStageResult train_cbl_stage(const Dataset& ds, const PipelineConfig& cfg) {
  validate(ds);
  auto s1 = train_concept_layers(ds.bundle, ds.bank, cfg.cbl);
  ConceptStageResult r;
  r.model.taxonomy = ds.taxonomy;
  r.model.bank = ds.bank;
  r.model.layers = std::move(s1.layers);
  r.model.hyper = cfg.hyperparameters();
  r.model.stage = Stage::concepts;
  r.trace = std::move(s1.trace);
  return r;
}

struct HeadStageResult {
  FitDiagnostics low, high;
};

/// Stage 2a: the two sparse heads, fitted independently.
inline HeadStageResult train_heads_stage(HilModel& model, const DatasetBundle& bundle, const PipelineConfig& cfg) {
  const Tensor xl = standardized_concepts(model, bundle.features, Level::low);
  const Tensor xh = standardized_concepts(model, bundle.features, Level::high);
  auto low = fit_sparse_head(xl, bundle.low_labels, model.taxonomy.low_count(), cfg.lambda, cfg.alpha, cfg.glm);
  auto high = fit_sparse_head(xh, bundle.high_labels, model.taxonomy.high_count(), cfg.lambda, cfg.alpha, cfg.glm);
  low.head.refresh_mask();
  high.head.refresh_mask();
  model.head_low = std::move(low.head);
  model.head_high = std::move(high.head);
  model.hyper.lambda = cfg.lambda;
  model.hyper.alpha = cfg.alpha;
  model.stage = Stage::heads;
  return {low.diagnostics, high.diagnostics};
}

/// Stage 2b: masked joint fine-tuning of both heads.
inline std::vector<JointTraceRow> train_joint_stage(HilModel& model, const DatasetBundle& bundle,
                                                   const PipelineConfig& cfg) {
  require_complete(model);
  const Tensor xl = standardized_concepts(model, bundle.features, Level::low);
  const Tensor xh = standardized_concepts(model, bundle.features, Level::high);
  auto r = joint_train(*model.head_low, *model.head_high, xl, xh, bundle.low_labels, bundle.high_labels, model.taxonomy,
                       cfg.joint);
  model.head_low = std::move(r.low);
  model.head_high = std::move(r.high);
  model.hyper.lambda_semantic = cfg.joint.lambda_semantic;
  model.stage = Stage::joint;
  return std::move(r.trace);
}

struct PipelineResult {
  HilModel model;
  std::vector<Stage1TraceRow> stage1_trace;
  HeadStageResult heads;
  std::vector<JointTraceRow> joint_trace;
};

inline PipelineResult run_pipeline(const Dataset& ds, const PipelineConfig& cfg) {
  PipelineResult r;
  auto s1 = train_cbl_stage(ds, cfg);
  r.model = std::move(s1.model);
  r.stage1_trace = std::move(s1.trace);
  r.heads = train_heads_stage(r.model, ds.bundle, cfg);
  if (cfg.joint_stage) r.joint_trace = train_joint_stage(r.model, ds.bundle, cfg);
  return r;
}

struct AblationRow {
  std::string setting;  ///< Neither, Visual, Semantic, Both
  bool visual = false;
  bool semantic = false;
  Metrics metrics;
  double saliency_mse = 0.0;
};

/// The consistency-loss grid: the visual term on or off (lambda_vis of the
/// base config vs 0) crossed with the joint semantic stage on or off.
inline std::vector<AblationRow> run_consistency_ablation(const Dataset& ds, const PipelineConfig& base) {
  std::vector<AblationRow> rows;
  const double lambda_vis = base.cbl.lambda_vis > 0.0 ? base.cbl.lambda_vis : 0.7;
  for (const auto& [name, visual, semantic] : {std::tuple{"Neither", false, false}, std::tuple{"Visual", true, false},
                                                std::tuple{"Semantic", false, true}, std::tuple{"Both", true, true}}) {
    PipelineConfig cfg = base;
    cfg.cbl.lambda_vis = visual ? lambda_vis : 0.0;
    cfg.joint_stage = semantic;
    const auto r = run_pipeline(ds, cfg);
    AblationRow row{name, visual, semantic, evaluate_model(r.model, ds.bundle).metrics, 0.0};
    row.saliency_mse = ds.bundle.spatial() ? mean_saliency_mse(ds.bundle.features, r.model.layers) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

inline std::string render_ablation(const std::vector<AblationRow>& rows) {
  std::string out = "setting    acc_low  acc_high  model_cons  gt_cons  saliency_mse\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-9s  %.4f   %.4f    %.4f      %.4f   %.6g\n", r.setting.c_str(), r.metrics.acc_low,
                  r.metrics.acc_high, r.metrics.model_consistency, r.metrics.ground_truth_consistency, r.saliency_mse);
    out += buf;
  }
  return out;
}

}  // namespace hilcbm
