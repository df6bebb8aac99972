#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hilcbm/error.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

enum class Level { low, high };

inline std::string_view to_string(Level level) { return level == Level::low ? "low" : "high"; }

inline Level parse_level(std::string_view s) {
  const std::string t = text::lower(text::trim(s));
  if (t == "low" || t == "l") return Level::low;
  if (t == "high" || t == "h") return Level::high;
  fail(ErrorKind::invalid_argument, "unknown level '" + std::string(s) + "' (expected low|high)");
}

/// Two-level class tree. Ids are dense and 0-based; names are presentation only.
class Taxonomy {
 public:
  Taxonomy() = default;

  std::size_t low_count() const noexcept { return low_names_.size(); }
  std::size_t high_count() const noexcept { return high_names_.size(); }
  const std::vector<std::string>& low_names() const noexcept { return low_names_; }
  const std::vector<std::string>& high_names() const noexcept { return high_names_; }
  const std::vector<std::size_t>& parents() const noexcept { return parent_; }
  const std::vector<std::string>& names(Level level) const {
    return level == Level::low ? low_names_ : high_names_;
  }
  std::size_t class_count(Level level) const { return names(level).size(); }

  std::size_t parent(std::size_t low_id) const {
    require(low_id < parent_.size(), ErrorKind::out_of_range,
            "low class id " + std::to_string(low_id) + " outside [0," + std::to_string(parent_.size()) + ")");
    return parent_[low_id];
  }

  friend bool operator==(const Taxonomy&, const Taxonomy&) = default;

  friend Taxonomy build_taxonomy(std::vector<std::string> low_names, std::vector<std::string> high_names,
                                 std::span<const std::pair<std::size_t, std::size_t>> parent_pairs);

 private:
  std::vector<std::string> low_names_;
  std::vector<std::string> high_names_;
  std::vector<std::size_t> parent_;
};

inline Taxonomy build_taxonomy(std::vector<std::string> low_names, std::vector<std::string> high_names,
                               std::span<const std::pair<std::size_t, std::size_t>> parent_pairs) {
  const std::size_t kl = low_names.size(), kh = high_names.size();
  require(kl > 0 && kh > 0, ErrorKind::invalid_argument, "taxonomy needs at least one class per level");
  auto check_unique = [](const std::vector<std::string>& names, const char* level) {
    std::set<std::string> seen;
    for (const auto& n : names)
      require(seen.insert(n).second, ErrorKind::invalid_argument,
              std::string("duplicate ") + level + " class name '" + n + "'");
  };
  check_unique(low_names, "low");
  check_unique(high_names, "high");

  constexpr std::size_t unset = static_cast<std::size_t>(-1);
  std::vector<std::size_t> parent(kl, unset);
  for (const auto& [low, high] : parent_pairs) {
    require(low < kl, ErrorKind::out_of_range, "unknown low id " + std::to_string(low));
    require(high < kh, ErrorKind::out_of_range, "unknown high id " + std::to_string(high));
    require(parent[low] == unset, ErrorKind::invalid_argument,
            "low id " + std::to_string(low) + " listed with more than one parent");
    parent[low] = high;
  }
  std::vector<std::size_t> children(kh, 0);
  for (std::size_t i = 0; i < kl; ++i) {
    require(parent[i] != unset, ErrorKind::invalid_argument,
            "low id " + std::to_string(i) + " ('" + low_names[i] + "') has no parent");
    ++children[parent[i]];
  }
  for (std::size_t h = 0; h < kh; ++h)
    require(children[h] > 0, ErrorKind::invalid_argument,
            "high class " + std::to_string(h) + " ('" + high_names[h] + "') has no children");

  Taxonomy tax;
  tax.low_names_ = std::move(low_names);
  tax.high_names_ = std::move(high_names);
  tax.parent_ = std::move(parent);
  return tax;
}

/// Parses "low_name<TAB>high_name" lines; high ids follow first appearance.
inline Taxonomy parse_taxonomy(const std::vector<std::string>& lines, const std::string& origin = "taxonomy") {
  std::vector<std::string> low, high;
  std::map<std::string, std::size_t> high_index;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i]).empty()) continue;
    const auto fields = text::split(lines[i], '\t');
    const std::string where = origin + ":" + std::to_string(i + 1);
    require(fields.size() <= 2, ErrorKind::format,
            where + ": " + std::to_string(fields.size()) +
                " tab-separated levels; only two-level taxonomies are supported");
    require(fields.size() == 2, ErrorKind::format, where + ": expected 'low_name<TAB>high_name'");
    const std::string l = text::trim(fields[0]), h = text::trim(fields[1]);
    require(!l.empty() && !h.empty(), ErrorKind::format, where + ": empty class name");
    auto [it, inserted] = high_index.emplace(h, high.size());
    if (inserted) high.push_back(h);
    pairs.emplace_back(low.size(), it->second);
    low.push_back(l);
  }
  return build_taxonomy(std::move(low), std::move(high), pairs);
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
  return parse_taxonomy(text::read_lines(path), path.string());
}

inline std::string render_taxonomy(const Taxonomy& tax) {
  std::string out;
  for (std::size_t i = 0; i < tax.low_count(); ++i)
    out += tax.low_names()[i] + "\t" + tax.high_names()[tax.parent(i)] + "\n";
  return out;
}

/// [Y_low ; Y_high] one-hot path vector of length K_L + K_H.
struct PathTarget {
  Tensor vector;
  std::size_t low = 0;
  std::size_t high = 0;
};

inline PathTarget tree_path_target(std::size_t low_label, const Taxonomy& tax) {
  require(low_label < tax.low_count(), ErrorKind::out_of_range,
          "low label " + std::to_string(low_label) + " outside [0," + std::to_string(tax.low_count()) + ")");
  PathTarget t{Tensor::vector(tax.low_count() + tax.high_count()), low_label, tax.parent(low_label)};
  t.vector[low_label] = 1.0;
  t.vector[tax.low_count() + t.high] = 1.0;
  return t;
}

inline std::vector<std::size_t> classes_under(std::size_t high_id, const Taxonomy& tax) {
  require(high_id < tax.high_count(), ErrorKind::out_of_range,
          "high class id " + std::to_string(high_id) + " outside [0," + std::to_string(tax.high_count()) + ")");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tax.low_count(); ++i)
    if (tax.parent(i) == high_id) out.push_back(i);
  return out;
}

struct ConsistencyMetrics {
  double model_consistency = 0.0;         ///< parent(pred_low) == pred_high
  double ground_truth_consistency = 0.0;  ///< parent(pred_low) == true_high
};

inline ConsistencyMetrics consistency_metrics(std::span<const std::size_t> pred_low,
                                              std::span<const std::size_t> pred_high,
                                              std::span<const std::size_t> true_high,
                                              const Taxonomy& tax) {
  require(pred_low.size() == pred_high.size() && pred_low.size() == true_high.size(),
          ErrorKind::size_mismatch, "consistency inputs differ in length");
  require(!pred_low.empty(), ErrorKind::invalid_argument, "consistency of an empty prediction set");
  std::size_t model = 0, truth = 0;
  for (std::size_t i = 0; i < pred_low.size(); ++i) {
    require(pred_high[i] < tax.high_count() && true_high[i] < tax.high_count(), ErrorKind::out_of_range,
            "high id out of range at sample " + std::to_string(i));
    const std::size_t p = tax.parent(pred_low[i]);
    model += p == pred_high[i];
    truth += p == true_high[i];
  }
  const auto n = static_cast<double>(pred_low.size());
  return {static_cast<double>(model) / n, static_cast<double>(truth) / n};
}

}  // namespace hilcbm
