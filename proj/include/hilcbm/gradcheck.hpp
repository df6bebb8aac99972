#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/objectives.hpp"
#include "hilcbm/rng.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/tensor.hpp"

namespace hilcbm {

/// A scalar function of a flat parameter vector with its analytic gradient.
struct Evaluation {
  long double value = 0.0L;  ///< evaluated in extended precision where available
  std::vector<double> gradient;
  std::uint64_t branch_signature = 0;
};

using Differentiable = std::function<Evaluation(std::span<const double>)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_raw_relative_error = 0.0;  ///< before the rounding allowance
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::vector<std::size_t> skipped;  ///< coordinates whose stencil crosses a kink
};

/// Central differences against the analytic gradient. Relative error per
/// coordinate is |numeric - analytic| / max(1e-8, |analytic|), where the
/// numerator first has the stencil's rounding bound
/// 4 * LDBL_EPSILON * (|f+| + |f-|) / (2 eps) taken off. Coordinates whose
/// +/-eps evaluations change the branch signature are not checkable.
inline GradCheckReport finite_diff_check(const Differentiable& loss, std::span<const double> params,
                                         double eps = 1e-6) {
  require(eps > 0.0, ErrorKind::invalid_argument, "finite difference step must be positive");
  const Evaluation base = loss(params);
  require(std::isfinite(base.value), ErrorKind::non_finite, "loss is not finite at the check point");
  require(base.gradient.size() == params.size(), ErrorKind::shape_mismatch, "gradient length differs from params");
  std::vector<double> x(params.begin(), params.end());
  GradCheckReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const Evaluation plus = loss(x);
    x[i] = keep - eps;
    const Evaluation minus = loss(x);
    x[i] = keep;
    require(std::isfinite(plus.value) && std::isfinite(minus.value), ErrorKind::non_finite,
            "loss is not finite near coordinate " + std::to_string(i));
    if (plus.branch_signature != base.branch_signature || minus.branch_signature != base.branch_signature) {
      report.skipped.push_back(i);
      continue;
    }
    const long double numeric = (plus.value - minus.value) / (2.0L * eps);
    const long double rounding =
        4.0L * std::numeric_limits<long double>::epsilon() * (std::abs(plus.value) + std::abs(minus.value)) / (2.0L * eps);
    const double analytic = base.gradient[i];
    const long double gap = std::abs(numeric - analytic);
    const double floor = std::max(1e-8, std::abs(analytic));
    const double err = static_cast<double>(std::max(0.0L, gap - rounding) / floor);
    report.max_raw_relative_error = std::max(report.max_raw_relative_error, static_cast<double>(gap / floor));
    ++report.checked;
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

namespace detail {

inline Tensor unflatten(std::span<const double> flat, std::size_t offset, const Shape& shape) {
  const std::size_t n = element_count(shape);
  return Tensor(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                           flat.begin() + static_cast<std::ptrdiff_t>(offset + n)));
}

inline void append(std::vector<double>& out, const Tensor& t) { out.insert(out.end(), t.values().begin(), t.values().end()); }

}  // namespace detail

// Adapters exposing each loss over a flat parameter vector.

/// Parameters: [Q_low ; Q_high] flattened.
inline Differentiable cbl_handle(Tensor p_low, Tensor p_high) {
  return [p_low = std::move(p_low), p_high = std::move(p_high)](std::span<const double> x) {
    const Tensor ql = detail::unflatten(x, 0, p_low.shape());
    const Tensor qh = detail::unflatten(x, ql.size(), p_high.shape());
    const LossValue l = cbl_loss(ql, p_low, qh, p_high);
    Evaluation e{cbl_value<long double>(ql, p_low, qh, p_high), {}, 0};
    detail::append(e.gradient, l.grads.at("Q_low"));
    detail::append(e.gradient, l.grads.at("Q_high"));
    return e;
  };
}

/// Parameters: [W_low ; W_high] flattened.
inline Differentiable visual_handle(Tensor features, Shape low_shape, Shape high_shape,
                                    VisualVariant variant = VisualVariant::mse) {
  return [features = std::move(features), low_shape = std::move(low_shape), high_shape = std::move(high_shape),
          variant](std::span<const double> x) {
    const Tensor wl = detail::unflatten(x, 0, low_shape);
    const Tensor wh = detail::unflatten(x, wl.size(), high_shape);
    const LossValue l = visual_loss(features, wl, wh, variant);
    Evaluation e{visual_value<long double>(features, wl, wh, variant), {}, l.branch_signature};
    detail::append(e.gradient, l.grads.at("W_low"));
    detail::append(e.gradient, l.grads.at("W_high"));
    return e;
  };
}

/// Parameters: [z_low ; z_high].
inline Differentiable tree_path_handle(PathTarget target, std::size_t low_count) {
  return [target = std::move(target), low_count](std::span<const double> x) {
    const LossValue l = tree_path_kl(x.subspan(0, low_count), x.subspan(low_count), target);
    Evaluation e{tree_path_kl_value<long double>(x.subspan(0, low_count), x.subspan(low_count), target), {}, 0};
    detail::append(e.gradient, l.grads.at("logits_low"));
    detail::append(e.gradient, l.grads.at("logits_high"));
    return e;
  };
}

/// Parameters: logits [N x K] flattened.
inline Differentiable cross_entropy_handle(std::vector<std::size_t> labels, std::size_t classes) {
  return [labels = std::move(labels), classes](std::span<const double> x) {
    const Tensor logits = detail::unflatten(x, 0, Shape{labels.size(), classes});
    const LossValue l = cross_entropy(logits, labels);
    Evaluation e{cross_entropy_value<long double>(logits, labels), {}, 0};
    detail::append(e.gradient, l.grads.at("logits"));
    return e;
  };
}

// ---------------------------------------------------------------------------
// The standard suite run by the CLI and the acceptance tests.

struct GradCheckCase {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

inline Tensor random_tensor(const Shape& shape, CounterRng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

/// Runs every loss at `points` random float64 points. Returns one row per
/// loss holding the worst relative error across its points.
inline std::vector<GradCheckCase> run_gradcheck_suite(std::size_t points, std::uint64_t seed, double eps = 1e-6) {
  CounterRng rng(seed, 0x6C);
  std::vector<GradCheckCase> cases = {{"cbl_loss"}, {"visual_loss"}, {"tree_path_kl"}, {"cross_entropy"}};
  auto record = [](GradCheckCase& c, const GradCheckReport& r) {
    c.max_relative_error = std::max(c.max_relative_error, r.max_relative_error);
    c.checked += r.checked;
    c.skipped += r.skipped.size();
  };
  for (std::size_t pt = 0; pt < points; ++pt) {
    {
      const Tensor pl = random_tensor({8, 3}, rng), ph = random_tensor({8, 2}, rng);
      std::vector<double> x;
      detail::append(x, random_tensor({8, 3}, rng));
      detail::append(x, random_tensor({8, 2}, rng));
      record(cases[0], finite_diff_check(cbl_handle(pl, ph), x, eps));
    }
    {
      const Tensor feats = random_tensor({3, 3, 3, 4}, rng);
      std::vector<double> x;
      detail::append(x, random_tensor({3, 4}, rng));
      detail::append(x, random_tensor({2, 4}, rng));
      record(cases[1], finite_diff_check(visual_handle(feats, {3, 4}, {2, 4}), x, eps));
    }
    {
      const std::vector<std::string> low = {"a", "b", "c", "d", "e"}, high = {"x", "y"};
      const std::vector<std::pair<std::size_t, std::size_t>> parents = {{0, 0}, {1, 0}, {2, 1}, {3, 1}, {4, 1}};
      const Taxonomy tax = build_taxonomy(low, high, parents);
      const std::vector<double> z = random_tensor({7}, rng, 2.0).storage();
      record(cases[2], finite_diff_check(tree_path_handle(tree_path_target(rng.index(5), tax), 5), z, eps));
    }
    {
      std::vector<std::size_t> labels(5);
      for (auto& l : labels) l = rng.index(4);
      const std::vector<double> z = random_tensor({5, 4}, rng, 2.0).storage();
      record(cases[3], finite_diff_check(cross_entropy_handle(labels, 4), z, eps));
    }
  }
  return cases;
}

}  // namespace hilcbm
