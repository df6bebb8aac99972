#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

struct ConceptSet {
  std::vector<std::string> names;
  std::vector<std::string> provenance;  ///< "<file>:<line>" or a generator tag

  std::size_t size() const noexcept { return names.size(); }
  friend bool operator==(const ConceptSet&, const ConceptSet&) = default;
};

struct ConceptBank {
  ConceptSet low;
  ConceptSet high;

  const ConceptSet& at(Level level) const { return level == Level::low ? low : high; }
  ConceptSet& at(Level level) { return level == Level::low ? low : high; }
  friend bool operator==(const ConceptBank&, const ConceptBank&) = default;
};

/// Trims, drops blank lines, and removes case-insensitive duplicates while
/// keeping the first spelling.
inline ConceptSet parse_concept_list(const std::vector<std::string>& lines, const std::string& origin) {
  ConceptSet set;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string concept_name = text::trim(lines[i]);
    if (concept_name.empty()) continue;
    if (!seen.insert(text::lower(concept_name)).second) continue;
    set.names.push_back(std::move(concept_name));
    set.provenance.push_back(origin + ":" + std::to_string(i + 1));
  }
  require(!set.names.empty(), ErrorKind::invalid_argument, origin + ": concept list is empty");
  return set;
}

inline ConceptSet load_concept_list(const std::filesystem::path& path) {
  return parse_concept_list(text::read_lines(path), path.string());
}

inline ConceptBank load_bank(const std::filesystem::path& low_path, const std::filesystem::path& high_path) {
  return ConceptBank{load_concept_list(low_path), load_concept_list(high_path)};
}

inline std::string render_concept_list(const ConceptSet& set) {
  std::string out;
  for (const auto& n : set.names) out += n + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

enum class FilterRule { length, class_similarity, low_activation };

inline std::string_view to_string(FilterRule rule) {
  switch (rule) {
    case FilterRule::length: return "length";
    case FilterRule::class_similarity: return "class_similarity";
    case FilterRule::low_activation: return "low_activation";
  }
  return "?";
}

struct FilterConfig {
  std::size_t max_len = 30;
  double sim_threshold = 0.85;
  double activation_threshold = 0.45;
  std::size_t top_k = 5;
  /// Fallback heuristic threshold on 1 - edit_distance / max_length.
  double edit_similarity_threshold = 0.9;
};

struct Removal {
  Level level;
  std::string concept_name;
  FilterRule rule;
  std::string detail;
};

struct FilterReport {
  std::vector<Removal> removed;
  std::vector<std::size_t> kept_low;   ///< input indices that survived, in order
  std::vector<std::size_t> kept_high;

  const std::vector<std::size_t>& kept(Level level) const { return level == Level::low ? kept_low : kept_high; }
};

/// Inputs for one level of the filter.
struct LevelFilterInput {
  const std::vector<std::string>* class_names = nullptr;
  const Tensor* text_similarity = nullptr;  ///< optional [concepts x classes]
  const Tensor* activations = nullptr;      ///< P matrix [N x concepts]
};

/// Case-insensitive containment of a class name, or edit similarity at or
/// above `threshold`. Used when no text-similarity matrix is supplied.
inline std::optional<std::string> heuristic_class_match(const std::string& concept_name,
                                                        const std::vector<std::string>& class_names,
                                                        double threshold) {
  const std::string c = text::lower(concept_name);
  for (const auto& cls : class_names) {
    const std::string k = text::lower(cls);
    if (!k.empty() && c.find(k) != std::string::npos) return "contains class name '" + cls + "'";
    const double longest = static_cast<double>(std::max(c.size(), k.size()));
    const double similarity = longest == 0 ? 1.0 : 1.0 - static_cast<double>(text::edit_distance(c, k)) / longest;
    if (similarity >= threshold)
      return "edit similarity " + text::format_double(similarity) + " to '" + cls + "'";
  }
  return std::nullopt;
}

inline double mean_top_k(const Tensor& p, std::size_t column, std::size_t k) {
  std::vector<double> col(p.dim(0));
  for (std::size_t i = 0; i < col.size(); ++i) col[i] = p(i, column);
  k = std::min(k, col.size());
  if (k == 0) return 0.0;
  std::partial_sort(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(k), col.end(), std::greater<>());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += col[i];
  return sum / static_cast<double>(k);
}

/// Applies the length, class-similarity and activation rules in that order;
/// a concept is attributed to the first rule it trips.
inline ConceptSet filter_level(const ConceptSet& set, Level level, const LevelFilterInput& in,
                               const FilterConfig& config, FilterReport& report) {
  require(in.activations != nullptr && in.class_names != nullptr, ErrorKind::invalid_argument,
          "filter inputs incomplete");
  const Tensor& p = *in.activations;
  require_rank(p, 2, "concept activation matrix");
  require(p.dim(1) == set.size(), ErrorKind::shape_mismatch,
          std::string(to_string(level)) + " activation matrix has " + std::to_string(p.dim(1)) +
              " columns for " + std::to_string(set.size()) + " concepts");
  if (in.text_similarity) {
    require(in.text_similarity->rank() == 2 && in.text_similarity->dim(0) == set.size() &&
                in.text_similarity->dim(1) == in.class_names->size(),
            ErrorKind::shape_mismatch, "text similarity matrix must be [concepts x classes]");
  }

  ConceptSet kept;
  auto& kept_idx = level == Level::low ? report.kept_low : report.kept_high;
  kept_idx.clear();
  for (std::size_t j = 0; j < set.size(); ++j) {
    const std::string& name = set.names[j];
    std::optional<std::pair<FilterRule, std::string>> hit;
    if (name.size() > config.max_len) {
      hit.emplace(FilterRule::length, std::to_string(name.size()) + " > " + std::to_string(config.max_len) + " characters");
    }
    if (!hit) {
      if (in.text_similarity) {
        for (std::size_t c = 0; c < in.class_names->size(); ++c) {
          const double s = (*in.text_similarity)(j, c);
          if (s > config.sim_threshold) {
            hit.emplace(FilterRule::class_similarity,
                        "similarity " + text::format_double(s) + " to '" + (*in.class_names)[c] + "'");
            break;
          }
        }
      } else if (auto why = heuristic_class_match(name, *in.class_names, config.edit_similarity_threshold)) {
        hit.emplace(FilterRule::class_similarity, *why);
      }
    }
    if (!hit) {
      const double top = mean_top_k(p, j, config.top_k);
      if (top < config.activation_threshold)
        hit.emplace(FilterRule::low_activation, "top-" + std::to_string(config.top_k) + " mean " +
                                                    text::format_double(top) + " < " +
                                                    text::format_double(config.activation_threshold));
    }
    if (hit) {
      report.removed.push_back({level, name, hit->first, hit->second});
    } else {
      kept.names.push_back(name);
      kept.provenance.push_back(set.provenance.at(j));
      kept_idx.push_back(j);
    }
  }
  require(!kept.names.empty(), ErrorKind::invalid_argument,
          std::string("filtering removed every ") + std::string(to_string(level)) + "-level concept");
  return kept;
}

struct FilterResult {
  ConceptBank bank;
  FilterReport report;
};

/// Filters both levels independently. `taxonomy` supplies the class names.
inline FilterResult filter_bank(const ConceptBank& bank, const Taxonomy& taxonomy, const Tensor& p_low,
                                const Tensor& p_high, const FilterConfig& config = {},
                                const Tensor* sim_low = nullptr, const Tensor* sim_high = nullptr) {
  FilterResult result;
  result.bank.low = filter_level(bank.low, Level::low, {&taxonomy.low_names(), sim_low, &p_low}, config, result.report);
  result.bank.high =
      filter_level(bank.high, Level::high, {&taxonomy.high_names(), sim_high, &p_high}, config, result.report);
  return result;
}

inline std::string render_filter_report(const FilterReport& report) {
  std::string out = "# level\trule\tconcept\tdetail\n";
  for (const auto& r : report.removed)
    out += std::string(to_string(r.level)) + "\t" + std::string(to_string(r.rule)) + "\t" + r.concept_name + "\t" +
           r.detail + "\n";
  out += "# kept low=" + std::to_string(report.kept_low.size()) +
         " high=" + std::to_string(report.kept_high.size()) + "\n";
  return out;
}

}  // namespace hilcbm
