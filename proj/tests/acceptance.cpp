// Runs every primary acceptance criterion and prints one PASS/FAIL line each.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "hilcbm/explain.hpp"
#include "hilcbm/gradcheck.hpp"
#include "hilcbm/intervention.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/pipeline.hpp"
#include "support.hpp"

using namespace hilcbm;
using namespace hilcbm::fixtures;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

char buf[512];

template <class... A>
std::string fmt(const char* f, A... a) {
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck_suite(20, 7);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string names;
  for (const auto& c : cases) {
    worst = std::max(worst, c.max_relative_error);
    names += c.name + "=" + fmt("%.2e", c.max_relative_error) + " ";
  }
  return {worst < 1e-5 && secs < 30.0 && cases.size() == 4, names + fmt("in %.2fs", secs)};
}

Outcome closed_form_losses() {
  const Taxonomy tax = build_taxonomy({"a", "b", "c", "d"}, {"x", "y"}, std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 0}, {2, 1}, {3, 1}});
  const std::vector<double> zl(4, 0.0), zh(2, 0.0);
  double tk_err = 0;
  for (std::size_t l = 0; l < 4; ++l)
    tk_err = std::max(tk_err, std::abs(tree_path_kl(zl, zh, tree_path_target(l, tax)).value - 2.0 * std::log(6.0)));
  const std::vector<std::size_t> labels{0, 1, 2};
  const double ce_err = std::abs(cross_entropy(Tensor(Shape{3, 3}), labels).value - std::log(3.0));
  const Tensor w(Shape{2, 2}, {1, -2, 0, 3});
  const bool en = elastic_net_penalty(w, 1.0).value == 6.0 && elastic_net_penalty(w, 0.0).value == 7.0 &&
                  elastic_net_penalty(w, 0.5).value == 6.5;
  return {tk_err <= 1e-12 && ce_err <= 1e-12 && en,
          fmt("|tk-2ln6|=%.1e |ce-ln3|=%.1e elastic_net=%s", tk_err, ce_err, en ? "6,7,6.5" : "mismatch")};
}

// Full-batch gradient descent to a gradient norm of 1e-10.
double gd_objective(const Tensor& x, const std::vector<std::size_t>& y, std::size_t k) {
  SparseHead h{Tensor::matrix(k, x.dim(1)), Tensor::vector(k), {}, 0.0, 0.5};
  double max_sq = 0;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double s = 1;
    for (std::size_t j = 0; j < x.dim(1); ++j) s += x(i, j) * x(i, j);
    max_sq = std::max(max_sq, s);
  }
  const double step = 1.0 / (0.5 * max_sq);
  for (std::size_t t = 0; t < 2000000; ++t) {
    const auto g = ce_gradient(h, x, y);
    double norm = 0;
    for (double v : g.weight.values()) norm = std::max(norm, std::abs(v));
    for (double v : g.bias.values()) norm = std::max(norm, std::abs(v));
    if (norm < 1e-10) break;
    for (std::size_t i = 0; i < g.weight.size(); ++i) h.weight[i] -= step * g.weight[i];
    for (std::size_t a = 0; a < k; ++a) h.bias[a] -= step * g.bias[a];
  }
  return glm_objective(h, x, y);
}

Outcome glm_optimality() {
  SynthConfig cfg;
  cfg.label_noise = 0.2;
  const Dataset ds = gen_synthetic(cfg);
  PipelineConfig pc;
  const HilModel m = train_cbl_stage(ds, pc).model;
  const Tensor x = standardized_concepts(m, ds.bundle.features, Level::low);
  const auto& y = ds.bundle.low_labels;
  GlmConfig tight;
  tight.tolerance = 1e-9;
  const auto fit = fit_sparse_head(x, y, 6, 0.0, 0.5, tight);
  const double gap = std::abs(fit.diagnostics.objective - gd_objective(x, y, 6));

  double worst_kkt = 0;
  bool all_converged = true, monotone = true;
  double prev = -1;
  for (double lambda : {0.0007, 0.003, 0.01, 0.03, 0.1, 0.3}) {
    const auto f = fit_sparse_head(x, y, 6, lambda, 1.0);
    all_converged = all_converged && f.diagnostics.converged;
    worst_kkt = std::max(worst_kkt, kkt_residual(f.head, x, y));
    monotone = monotone && f.head.sparsity() >= prev;
    prev = f.head.sparsity();
  }
  return {gap < 1e-6 && worst_kkt < 1e-4 && all_converged && monotone,
          fmt("|saga-gd| objective gap=%.2e, max kkt=%.2e, sparsity monotone=%s", gap, worst_kkt, monotone ? "yes" : "no")};
}

Outcome sparsity_preservation() {
  std::size_t zeros = 0, violations = 0;
  for (std::uint64_t seed : {7, 8, 9}) {
    PipelineConfig cfg;
    cfg.set_seed(seed);
    HilModel m = train_cbl_stage(clean_fixture(), cfg).model;
    train_heads_stage(m, clean_fixture().bundle, cfg);
    const SparseHead low = *m.head_low, high = *m.head_high;
    train_joint_stage(m, clean_fixture().bundle, cfg);
    for (const auto& [before, after] : {std::pair{&low, &*m.head_low}, std::pair{&high, &*m.head_high}})
      for (std::size_t i = 0; i < before->weight.size(); ++i)
        if (before->weight[i] == 0.0) {
          ++zeros;
          violations += after->weight[i] != 0.0;
        }
  }
  return {violations == 0 && zeros > 0, fmt("%zu stage-2a zeros over 3 seeds, %zu violations", zeros, violations)};
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  FILE* pipe = popen((std::string(HILCBM_CLI_PATH) + " " + args + " 2>&1").c_str(), "r");
  if (!pipe) return -1;
  char chunk[4096];
  std::size_t n;
  while ((n = fread(chunk, 1, sizeof chunk, pipe)) > 0)
    if (out) out->append(chunk, n);
  const int status = pclose(pipe);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome end_to_end_fixture() {
  const auto t0 = Clock::now();
  const auto dir = scratch_dir("acceptance_e2e");
  const std::string data = "'" + (dir / "data").string() + "'", ckpt = "'" + (dir / "ckpt").string() + "'";
  const std::string bundle = "'" + (dir / "data" / "bundle.manifest").string() + "'";
  int rc = run_cli("gen-synth --n-high 3 --low-per-high 2 --samples-per-low 50 --noise 0.1 --seed 7 --out " + data);
  rc = rc ? rc : run_cli("train-cbl --bundle " + bundle + " --out " + ckpt);
  rc = rc ? rc : run_cli("train-heads --bundle " + bundle + " --checkpoint " + ckpt);
  rc = rc ? rc : run_cli("train-joint --bundle " + bundle + " --checkpoint " + ckpt);
  std::string out;
  rc = rc ? rc : run_cli("eval --bundle " + bundle + " --checkpoint " + ckpt, &out);
  const double secs = seconds_since(t0);
  if (rc != 0) return {false, fmt("CLI chain exited %d", rc)};
  const HilModel m = checkpoint::load(dir / "ckpt");
  const Metrics r = evaluate_model(m, load_bundle(dir / "data" / "bundle.manifest").bundle).metrics;
  return {r.acc_low >= 0.95 && r.acc_high >= 0.97 && r.model_consistency >= 0.95 && secs < 120.0,
          fmt("acc_low=%.4f acc_high=%.4f model_consistency=%.4f in %.1fs", r.acc_low, r.acc_high, r.model_consistency,
              secs)};
}

Outcome consistency_directionality() {
  const auto rows = run_consistency_ablation(noisy_fixture(), PipelineConfig{});
  const auto& neither = rows[0];
  const auto& visual = rows[1];
  const auto& semantic = rows[2];
  const auto& both = rows[3];
  const bool sem = semantic.metrics.model_consistency >= neither.metrics.model_consistency &&
                   both.metrics.model_consistency >= visual.metrics.model_consistency;
  const bool vis = visual.saliency_mse <= neither.saliency_mse && both.saliency_mse <= semantic.saliency_mse;
  return {sem && vis, fmt("consistency off/on: %.4f/%.4f (vis off) %.4f/%.4f (vis on); saliency mse off/on: %.4g/%.4g",
                          neither.metrics.model_consistency, semantic.metrics.model_consistency,
                          visual.metrics.model_consistency, both.metrics.model_consistency, neither.saliency_mse,
                          visual.saliency_mse)};
}

Outcome explanation_additivity() {
  const HilModel& m = trained_clean().model;
  const auto& b = clean_fixture().bundle;
  CounterRng rng(2024);
  double worst = 0;
  std::size_t checks = 0;
  for (int t = 0; t < 100; ++t) {
    const ConceptVector cv = concept_vector(m, sample_features(b, rng.index(b.size())));
    for (Level level : {Level::low, Level::high}) {
      const SparseHead& h = m.head(level);
      const auto z = logits_of(h, cv.standardized(level));
      const auto order = permutation(h.classes(), rng);
      for (std::size_t j = 0; j < 3; ++j) {
        const std::size_t c = order[j];
        const auto e = explain_class(h, cv, level, c, 1, m.bank.at(level), m.taxonomy);
        double sum = e.bias;
        for (const auto& k : e.all) sum += k.contribution;
        worst = std::max(worst, std::abs(sum - z[c]));
        ++checks;
      }
    }
  }
  return {worst < 1e-9 && checks == 600, fmt("%zu decompositions, max |sum+bias-logit|=%.2e", checks, worst)};
}

Outcome intervention_soundness() {
  const auto fixture = std::make_shared<const HilModel>(two_class_model());
  Session edit("edit", fixture);
  const auto before = edit.predict(retriever_sample()).low.name;
  edit.edit_weight(Level::low, 1, 0, 3.0);
  const auto after = edit.predict(retriever_sample()).low.name;
  const bool flipped = before == "golden retriever" && after == "black labrador";

  const auto trained = std::make_shared<const HilModel>(trained_clean().model);
  const auto& b = clean_fixture().bundle;
  std::size_t total = 0, inside = 0;
  for (std::size_t h = 0; h < trained->taxonomy.high_count(); ++h) {
    Session s("mask", trained);
    s.mask_to_high_class(h);
    for (std::size_t i = 0; i < b.size(); ++i) {
      ++total;
      inside += trained->taxonomy.parent(s.repredict(sample_features(b, i)).prediction.low.id) == h;
    }
  }

  Session live("live", trained);
  live.edit_weight(Level::low, 2, 1, -0.75);
  live.mask_to_high_class(1);
  live.override_concepts({{Level::high, 0, 1.25}, {Level::low, 5, -2.0}});
  live.edit_weight(Level::high, 1, 1, 0.1);
  const bool replayed = Session::replay("replay", trained, live.log())->state() == live.state();
  return {flipped && inside == total && replayed,
          fmt("edit flip %s -> %s; masked repredictions inside %zu/%zu; replay %s", before.c_str(), after.c_str(), inside,
              total, replayed ? "equal" : "DIFFERENT")};
}

Outcome metric_oracle() {
  CounterRng rng(99);
  std::size_t mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t kh = 1 + rng.index(5), kl = kh + rng.index(8), n = 1 + rng.index(40);
    std::vector<std::string> low, high;
    std::vector<std::pair<std::size_t, std::size_t>> parents;
    for (std::size_t h = 0; h < kh; ++h) high.push_back("h" + std::to_string(h));
    for (std::size_t l = 0; l < kl; ++l) {
      low.push_back("l" + std::to_string(l));
      parents.emplace_back(l, l < kh ? l : rng.index(kh));
    }
    const Taxonomy tax = build_taxonomy(low, high, parents);
    std::vector<std::size_t> pl(n), ph(n), th(n);
    std::size_t mc = 0, gc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      pl[i] = rng.index(kl);
      ph[i] = rng.index(kh);
      th[i] = rng.index(kh);
      for (const auto& [l, h] : parents)
        if (l == pl[i]) mc += h == ph[i], gc += h == th[i];
    }
    const auto got = consistency_metrics(pl, ph, th, tax);
    mismatches += got.model_consistency != static_cast<double>(mc) / n;
    mismatches += got.ground_truth_consistency != static_cast<double>(gc) / n;
  }
  return {mismatches == 0, fmt("200 random instances, %zu mismatches", mismatches)};
}

Outcome determinism() {
  const auto a = scratch_dir("acceptance_det_a"), b = scratch_dir("acceptance_det_b");
  checkpoint::save(run_pipeline(clean_fixture(), PipelineConfig{}).model, a);
  checkpoint::save(run_pipeline(clean_fixture(), PipelineConfig{}).model, b);
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    differing += slurp(entry.path()) != slurp(b / entry.path().filename());
  }
  return {files > 0 && differing == 0, fmt("%zu checkpoint files, %zu differ", files, differing)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"closed-form loss values", closed_form_losses},
      {"GLM optimality", glm_optimality},
      {"sparsity preservation", sparsity_preservation},
      {"end-to-end fixture", end_to_end_fixture},
      {"consistency-loss directionality", consistency_directionality},
      {"explanation additivity", explanation_additivity},
      {"intervention soundness", intervention_soundness},
      {"metric oracle equivalence", metric_oracle},
      {"determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %-32s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
