#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hilcbm/concept_bank.hpp"
#include "hilcbm/dataset.hpp"
#include "hilcbm/explain.hpp"
#include "hilcbm/fmat.hpp"
#include "hilcbm/gradcheck.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/pipeline.hpp"
#include "hilcbm/service.hpp"

namespace fs = std::filesystem;
using namespace hilcbm;

namespace {

// Error kinds caused by the operator's inputs exit 1; everything else exits 2.
int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::divergence:
    case ErrorKind::non_finite: return 2;
    default: return 1;
  }
}

struct Options {
  std::uint64_t seed = 7;
  std::string bundle, checkpoint, out, trace;

  // gen-synth
  SynthConfig synth{};

  // filter-concepts
  FilterConfig filter{};
  std::string text_sim_low, text_sim_high;

  // training
  PipelineConfig pipeline{};
  std::string visual_variant = "mse";

  // eval / predict / explain
  std::string ablate;
  std::string sample;
  std::optional<std::size_t> index, class_low, class_high;
  std::size_t k = 3;
  bool as_json = false;

  // gradcheck
  std::size_t points = 20;
  double eps = 1e-6;
  double tolerance = 1e-5;

  // serve
  std::string host = "127.0.0.1";
  int port = 8080;
  long long session_ttl = 1800;
};

void add_seed(CLI::App* app, Options& o) {
  app->add_option("--seed", o.seed, "Seed for every random stream")->capture_default_str();
}

HilModel load_model(const Options& o) { return checkpoint::load(o.checkpoint); }

fs::path output_dir(const Options& o) { return o.out.empty() ? fs::path(o.checkpoint) : fs::path(o.out); }

void apply_seed(Options& o) {
  o.pipeline.set_seed(o.seed);
  o.pipeline.cbl.visual_variant = parse_visual_variant(o.visual_variant);
}

Tensor pick_sample(const Options& o, const DatasetBundle& b, std::string* id_out) {
  std::size_t i = 0;
  if (!o.sample.empty()) {
    const auto found = b.find(o.sample);
    require(found.has_value(), ErrorKind::not_found, "unknown sample '" + o.sample + "'");
    i = *found;
  } else {
    require(o.index.has_value(), ErrorKind::invalid_argument, "give --sample ID or --index I");
    i = *o.index;
  }
  *id_out = b.sample_ids.at(i);
  return sample_features(b, i);
}

int cmd_gen_synth(Options& o) {
  o.synth.seed = o.seed;
  const auto ds = gen_synthetic(o.synth);
  const auto manifest = save_bundle(ds, o.out);
  std::printf("wrote %s (N=%zu, %zu low / %zu high classes)\n", manifest.string().c_str(), ds.bundle.size(),
              ds.taxonomy.low_count(), ds.taxonomy.high_count());
  return 0;
}

int cmd_filter(Options& o) {
  Dataset ds = load_bundle(o.bundle);
  std::optional<Tensor> sl, sh;
  if (!o.text_sim_low.empty()) sl = fmat::read(o.text_sim_low);
  if (!o.text_sim_high.empty()) sh = fmat::read(o.text_sim_high);
  const auto r = filter_bank(ds.bank, ds.taxonomy, ds.bundle.p_low, ds.bundle.p_high, o.filter, sl ? &*sl : nullptr,
                             sh ? &*sh : nullptr);
  ds.bundle.p_low = gather_columns(ds.bundle.p_low, r.report.kept_low);
  ds.bundle.p_high = gather_columns(ds.bundle.p_high, r.report.kept_high);
  ds.bank = r.bank;
  const auto manifest = save_bundle(ds, o.out);
  text::write_file(fs::path(o.out) / "filter_report.tsv", render_filter_report(r.report));
  std::printf("kept %zu low and %zu high concepts, removed %zu; wrote %s\n", r.report.kept_low.size(),
              r.report.kept_high.size(), r.report.removed.size(), manifest.string().c_str());
  return 0;
}

int cmd_train_cbl(Options& o) {
  apply_seed(o);
  const Dataset ds = load_bundle(o.bundle);
  const auto r = train_cbl_stage(ds, o.pipeline);
  checkpoint::save(r.model, o.out);
  if (!o.trace.empty()) text::write_file(o.trace, render_stage1_trace(r.trace));
  const auto& last = r.trace.back();
  std::printf("stage 1 done: cbl=%.6f vis=%.6f total=%.6f; checkpoint %s\n", last.cbl, last.vis, last.total,
              o.out.c_str());
  return 0;
}

int cmd_train_heads(Options& o) {
  apply_seed(o);
  const Dataset ds = load_bundle(o.bundle);
  HilModel m = load_model(o);
  const auto r = train_heads_stage(m, ds.bundle, o.pipeline);
  checkpoint::save(m, output_dir(o));
  std::printf("%s%s", render_diagnostics(r.low, "low").c_str(), render_diagnostics(r.high, "high").c_str());
  return 0;
}

int cmd_train_joint(Options& o) {
  apply_seed(o);
  const Dataset ds = load_bundle(o.bundle);
  HilModel m = load_model(o);
  const auto trace = train_joint_stage(m, ds.bundle, o.pipeline);
  checkpoint::save(m, output_dir(o));
  if (!o.trace.empty()) text::write_file(o.trace, render_joint_trace(trace));
  const auto& last = trace.back();
  std::printf("joint stage done: ce_low=%.6f ce_high=%.6f tk=%.6f total=%.6f\n", last.ce_low, last.ce_high, last.tk,
              last.total);
  return 0;
}

int cmd_eval(Options& o) {
  apply_seed(o);
  const Dataset ds = load_bundle(o.bundle);
  if (!o.ablate.empty()) {
    require(o.ablate == "consistency", ErrorKind::invalid_argument, "--ablate supports only 'consistency'");
    std::printf("%s", render_ablation(run_consistency_ablation(ds, o.pipeline)).c_str());
    return 0;
  }
  require(!o.checkpoint.empty(), ErrorKind::invalid_argument, "eval needs --checkpoint (or --ablate consistency)");
  const HilModel m = load_model(o);
  const auto r = evaluate_model(m, ds.bundle);
  std::printf("%s", render_metrics(r.metrics).c_str());
  return 0;
}

int cmd_predict(Options& o) {
  const Dataset ds = load_bundle(o.bundle);
  const HilModel m = load_model(o);
  std::string id;
  const auto p = predict_hier(m, pick_sample(o, ds.bundle, &id));
  if (o.as_json) {
    json j = api::to_json(p);
    j["sample_id"] = id;
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    std::printf("%s: HIGH %s (p=%.3f) LOW %s (p=%.3f) %s\n", id.c_str(), p.high.name.c_str(), p.high.probability,
                p.low.name.c_str(), p.low.probability, p.consistent ? "consistent" : "INCONSISTENT");
  }
  return 0;
}

int cmd_explain(Options& o) {
  const Dataset ds = load_bundle(o.bundle);
  const HilModel m = load_model(o);
  std::string id;
  const auto ex = explain_hier(m, pick_sample(o, ds.bundle, &id), ExplainRequest{o.k, o.class_low, o.class_high});
  if (o.as_json) {
    json j = api::to_json(ex);
    j["sample_id"] = id;
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    std::printf("%s: %s\n", id.c_str(), render_explanation(ex).c_str());
  }
  return 0;
}

int cmd_gradcheck(Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite(o.points, o.seed, o.eps);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  for (const auto& c : cases) {
    const bool pass = c.max_relative_error < o.tolerance;
    ok = ok && pass;
    std::printf("%-14s max_rel_err=%.3e checked=%zu skipped=%zu %s\n", c.name.c_str(), c.max_relative_error, c.checked,
                c.skipped, pass ? "ok" : "FAIL");
  }
  std::printf("%zu points per loss, %.2fs, tolerance %.1e: %s\n", o.points, secs, o.tolerance, ok ? "PASS" : "FAIL");
  return ok ? 0 : 2;
}

int cmd_serve(Options& o) {
  auto model = std::make_shared<const HilModel>(load_model(o));
  std::optional<DatasetBundle> bundle;
  if (!o.bundle.empty()) bundle = load_bundle(o.bundle).bundle;
  require(o.session_ttl > 0, ErrorKind::invalid_argument, "--session-ttl must be positive");
  Service service(model, std::move(bundle), std::chrono::seconds(o.session_ttl));
  std::printf("serving %s on http://%s:%d\n", o.checkpoint.c_str(), o.host.c_str(), o.port);
  std::fflush(stdout);
  service.serve(o.host, o.port);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical label-free concept bottleneck models: training, evaluation, explanation and debugging"};
  app.set_config("--config", "", "TOML/INI file of option values; flags on the command line take precedence");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  Options o;
  int (*run)(Options&) = nullptr;
  auto sub = [&](const char* name, const char* about, int (*fn)(Options&)) {
    CLI::App* s = app.add_subcommand(name, about);
    s->callback([&run, fn] { run = fn; });
    return s;
  };

  auto* gen = sub("gen-synth", "Write a synthetic dataset bundle with a known two-level structure", cmd_gen_synth);
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--n-high", o.synth.n_high, "High-level classes")->capture_default_str();
  gen->add_option("--low-per-high", o.synth.low_per_high, "Low-level classes under each high class")->capture_default_str();
  gen->add_option("--samples-per-low", o.synth.samples_per_low, "Samples per low class")->capture_default_str();
  gen->add_option("--dim", o.synth.dim, "Feature channels D")->capture_default_str();
  gen->add_option("--height", o.synth.height, "Feature map height")->capture_default_str();
  gen->add_option("--width", o.synth.width, "Feature map width")->capture_default_str();
  gen->add_option("--noise", o.synth.noise, "Feature jitter and target noise")->capture_default_str();
  gen->add_option("--label-noise", o.synth.label_noise, "Fraction of low labels reassigned")->capture_default_str();
  gen->add_option("--clutter", o.synth.clutter, "Background feature std")->capture_default_str();
  gen->add_option("--high-separation", o.synth.high_separation, "Distance between high-class offsets")->capture_default_str();
  gen->add_option("--low-separation", o.synth.low_separation, "Distance between sibling low classes")->capture_default_str();
  add_seed(gen, o);

  auto* filt = sub("filter-concepts", "Drop long, class-like and weakly activated concepts from a bundle", cmd_filter);
  filt->add_option("--bundle", o.bundle, "Input bundle manifest")->required();
  filt->add_option("--out", o.out, "Output bundle directory")->required();
  filt->add_option("--max-len", o.filter.max_len, "Maximum concept length in characters")->capture_default_str();
  filt->add_option("--sim-threshold", o.filter.sim_threshold, "Concept/class text similarity cut-off")->capture_default_str();
  filt->add_option("--activation-threshold", o.filter.activation_threshold, "Minimum mean top-k target similarity")
      ->capture_default_str();
  filt->add_option("--top-k", o.filter.top_k, "Images averaged for the activation rule")->capture_default_str();
  filt->add_option("--text-sim-low", o.text_sim_low, "FMAT [concepts x low classes] text similarities");
  filt->add_option("--text-sim-high", o.text_sim_high, "FMAT [concepts x high classes] text similarities");

  auto* cbl = sub("train-cbl", "Train both concept bottleneck layers (stage 1)", cmd_train_cbl);
  cbl->add_option("--bundle", o.bundle, "Bundle manifest")->required();
  cbl->add_option("--out", o.out, "Checkpoint directory to write")->required();
  cbl->add_option("--lambda-vis", o.pipeline.cbl.lambda_vis, "Visual consistency weight")->capture_default_str();
  cbl->add_option("--visual-variant", o.visual_variant, "Visual loss: mse or iou")->capture_default_str();
  cbl->add_option("--steps", o.pipeline.cbl.steps, "Optimizer steps")->capture_default_str();
  cbl->add_option("--batch", o.pipeline.cbl.batch_size, "Mini-batch size")->capture_default_str();
  cbl->add_option("--lr", o.pipeline.cbl.optimizer.learning_rate, "Adam learning rate")->capture_default_str();
  cbl->add_option("--trace", o.trace, "Write the loss trace CSV here");
  add_seed(cbl, o);

  auto* heads = sub("train-heads", "Fit the two sparse classifier heads (stage 2a)", cmd_train_heads);
  heads->add_option("--bundle", o.bundle, "Bundle manifest")->required();
  heads->add_option("--checkpoint", o.checkpoint, "Checkpoint with trained concept layers")->required();
  heads->add_option("--out", o.out, "Checkpoint directory to write (default: update in place)");
  heads->add_option("--lambda", o.pipeline.lambda, "Elastic-net strength")->capture_default_str();
  heads->add_option("--alpha", o.pipeline.alpha, "L1 share of the elastic net")->capture_default_str();
  heads->add_option("--max-epochs", o.pipeline.glm.max_epochs, "Solver epoch limit")->capture_default_str();
  heads->add_option("--tolerance", o.pipeline.glm.tolerance, "KKT residual at which the solver stops")->capture_default_str();
  add_seed(heads, o);

  auto* joint = sub("train-joint", "Masked joint fine-tuning of both heads (stage 2b)", cmd_train_joint);
  joint->add_option("--bundle", o.bundle, "Bundle manifest")->required();
  joint->add_option("--checkpoint", o.checkpoint, "Checkpoint with trained heads")->required();
  joint->add_option("--out", o.out, "Checkpoint directory to write (default: update in place)");
  joint->add_option("--lambda-semantic", o.pipeline.joint.lambda_semantic, "Tree-path KL weight")->capture_default_str();
  joint->add_option("--steps", o.pipeline.joint.steps, "Optimizer steps")->capture_default_str();
  joint->add_option("--batch", o.pipeline.joint.batch_size, "Mini-batch size")->capture_default_str();
  joint->add_option("--lr", o.pipeline.joint.optimizer.learning_rate, "Adam learning rate")->capture_default_str();
  joint->add_option("--trace", o.trace, "Write the loss trace CSV here");
  add_seed(joint, o);

  auto* ev = sub("eval", "Accuracy (low || high), consistency and sparsity of a checkpoint", cmd_eval);
  ev->add_option("--bundle", o.bundle, "Bundle manifest")->required();
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint directory");
  ev->add_option("--ablate", o.ablate, "'consistency': retrain and report the four loss settings")
      ->check(CLI::IsMember({"consistency"}));
  ev->add_option("--lambda-vis", o.pipeline.cbl.lambda_vis, "Visual weight used by --ablate")->capture_default_str();
  ev->add_option("--lambda-semantic", o.pipeline.joint.lambda_semantic, "Semantic weight used by --ablate")
      ->capture_default_str();
  ev->add_option("--lambda", o.pipeline.lambda, "Elastic-net strength used by --ablate")->capture_default_str();
  ev->add_option("--alpha", o.pipeline.alpha, "Elastic-net L1 share used by --ablate")->capture_default_str();
  add_seed(ev, o);

  for (auto [name, about, fn] : {std::tuple{"predict", "Hierarchical prediction for one bundle sample", cmd_predict},
                                 std::tuple{"explain", "Concept explanation, high level first", cmd_explain}}) {
    auto* s = sub(name, about, fn);
    s->add_option("--bundle", o.bundle, "Bundle manifest")->required();
    s->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    s->add_option("--sample", o.sample, "Sample id");
    s->add_option("--index", o.index, "Sample index (when no id is given)");
    s->add_flag("--json", o.as_json, "Structured output");
    if (std::string(name) == "explain") {
      s->add_option("--k", o.k, "Concepts shown per level")->capture_default_str();
      s->add_option("--class-low", o.class_low, "Explain this low class instead of the prediction");
      s->add_option("--class-high", o.class_high, "Explain this high class instead of the prediction");
    }
  }

  auto* gc = sub("gradcheck", "Finite-difference check of every analytic gradient", cmd_gradcheck);
  gc->add_option("--points", o.points, "Random points per loss")->capture_default_str();
  gc->add_option("--eps", o.eps, "Central-difference step")->capture_default_str();
  gc->add_option("--tolerance", o.tolerance, "Maximum allowed relative error")->capture_default_str();
  add_seed(gc, o);

  auto* sv = sub("serve", "HTTP API for prediction, explanation and debugging sessions", cmd_serve);
  sv->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  sv->add_option("--bundle", o.bundle, "Bundle manifest whose samples can be addressed by id");
  sv->add_option("--host", o.host, "Bind address")->capture_default_str();
  sv->add_option("--port", o.port, "TCP port")->capture_default_str();
  sv->add_option("--session-ttl", o.session_ttl, "Idle seconds before a session expires")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    return run(o);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
}
