#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hilcbm/concept_bank.hpp"
#include "hilcbm/error.hpp"
#include "hilcbm/fmat.hpp"
#include "hilcbm/rng.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

struct DatasetBundle {
  Tensor features;  ///< [N x H x W x D] or pooled [N x D]
  std::vector<std::size_t> low_labels;
  std::vector<std::size_t> high_labels;
  Tensor p_low;   ///< [N x n] image-concept similarity targets
  Tensor p_high;  ///< [N x m]
  std::vector<std::string> sample_ids;
  std::vector<std::string> thumbnails;  ///< empty entries when absent

  std::size_t size() const noexcept { return sample_ids.size(); }
  bool spatial() const { return features.rank() == 4; }
  const Tensor& targets(Level level) const { return level == Level::low ? p_low : p_high; }
  const std::vector<std::size_t>& labels(Level level) const { return level == Level::low ? low_labels : high_labels; }

  std::optional<std::size_t> find(std::string_view id) const {
    for (std::size_t i = 0; i < sample_ids.size(); ++i)
      if (sample_ids[i] == id) return i;
    return std::nullopt;
  }

  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

/// A bundle together with the taxonomy and concept bank it was built against.
struct Dataset {
  DatasetBundle bundle;
  Taxonomy taxonomy;
  ConceptBank bank;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void validate(const Dataset& ds) {
  const auto& b = ds.bundle;
  const std::size_t n = b.sample_ids.size();
  require(b.features.rank() == 2 || b.features.rank() == 4, ErrorKind::shape_mismatch,
          "features must be [N x D] or [N x H x W x D], got " + shape_string(b.features.shape()));
  auto same_n = [n](std::size_t got, const char* what) {
    require(got == n, ErrorKind::size_mismatch,
            std::string(what) + " has " + std::to_string(got) + " entries, expected " + std::to_string(n));
  };
  same_n(b.features.dim(0), "features");
  same_n(b.low_labels.size(), "low labels");
  same_n(b.high_labels.size(), "high labels");
  require_rank(b.p_low, 2, "P_low");
  require_rank(b.p_high, 2, "P_high");
  same_n(b.p_low.dim(0), "P_low");
  same_n(b.p_high.dim(0), "P_high");
  if (!b.thumbnails.empty()) same_n(b.thumbnails.size(), "thumbnails");
  require(b.p_low.dim(1) == ds.bank.low.size() && b.p_high.dim(1) == ds.bank.high.size(),
          ErrorKind::shape_mismatch, "P matrix columns do not match concept counts");
  require(b.features.all_finite() && b.p_low.all_finite() && b.p_high.all_finite(), ErrorKind::non_finite,
          "bundle contains non-finite values");
  for (std::size_t i = 0; i < n; ++i) {
    require(b.low_labels[i] < ds.taxonomy.low_count(), ErrorKind::out_of_range,
            "sample " + std::to_string(i) + ": low label " + std::to_string(b.low_labels[i]) +
                " outside [0," + std::to_string(ds.taxonomy.low_count()) + ")");
    require(b.high_labels[i] < ds.taxonomy.high_count(), ErrorKind::out_of_range,
            "sample " + std::to_string(i) + ": high label " + std::to_string(b.high_labels[i]) +
                " outside [0," + std::to_string(ds.taxonomy.high_count()) + ")");
  }
}

// ---------------------------------------------------------------------------
// On-disk layout: a manifest of "key = value" lines naming sibling files.

namespace bundle_files {
inline constexpr const char* manifest = "bundle.manifest";
inline constexpr const char* features = "features.fmat";
inline constexpr const char* p_low = "p_low.fmat";
inline constexpr const char* p_high = "p_high.fmat";
inline constexpr const char* labels = "labels.txt";
inline constexpr const char* taxonomy = "taxonomy.tsv";
inline constexpr const char* concepts_low = "concepts_low.txt";
inline constexpr const char* concepts_high = "concepts_high.txt";
}  // namespace bundle_files

/// Writes all member files into `dir` and returns the manifest path.
inline std::filesystem::path save_bundle(const Dataset& ds, const std::filesystem::path& dir) {
  validate(ds);
  namespace bf = bundle_files;
  std::filesystem::create_directories(dir);
  fmat::write(ds.bundle.features, dir / bf::features);
  fmat::write(ds.bundle.p_low, dir / bf::p_low);
  fmat::write(ds.bundle.p_high, dir / bf::p_high);
  std::string labels;
  for (std::size_t i = 0; i < ds.bundle.size(); ++i)
    labels += std::to_string(ds.bundle.low_labels[i]) + "\t" + std::to_string(ds.bundle.high_labels[i]) + "\n";
  text::write_file(dir / bf::labels, labels);
  text::write_file(dir / bf::taxonomy, render_taxonomy(ds.taxonomy));
  text::write_file(dir / bf::concepts_low, render_concept_list(ds.bank.low));
  text::write_file(dir / bf::concepts_high, render_concept_list(ds.bank.high));

  text::KeyValueFile kv;
  kv.add("format", "hilcbm-bundle");
  kv.add("version", "1");
  kv.add("features", bf::features);
  kv.add("p_low", bf::p_low);
  kv.add("p_high", bf::p_high);
  kv.add("labels", bf::labels);
  kv.add("taxonomy", bf::taxonomy);
  kv.add("concepts_low", bf::concepts_low);
  kv.add("concepts_high", bf::concepts_high);
  for (std::size_t i = 0; i < ds.bundle.size(); ++i) {
    const bool thumb = !ds.bundle.thumbnails.empty() && !ds.bundle.thumbnails[i].empty();
    kv.add("sample", ds.bundle.sample_ids[i] + (thumb ? "\t" + ds.bundle.thumbnails[i] : std::string()));
  }
  const auto path = dir / bf::manifest;
  text::write_file(path, "# hilcbm dataset manifest\n" + kv.render());
  return path;
}

inline Dataset load_bundle(const std::filesystem::path& manifest_path) {
  const auto kv = text::KeyValueFile::load(manifest_path);
  require(kv.get("format") == "hilcbm-bundle", ErrorKind::format,
          manifest_path.string() + " is not a bundle manifest");
  require(kv.get("version") == "1", ErrorKind::version, "unsupported bundle version " + kv.get("version"));
  const auto base = manifest_path.parent_path();
  auto member = [&](const char* key) {
    const auto p = base / kv.get(key);
    require(std::filesystem::exists(p), ErrorKind::io, "missing bundle member '" + std::string(key) + "': " + p.string());
    return p;
  };

  Dataset ds;
  ds.taxonomy = load_taxonomy(member("taxonomy"));
  ds.bank = load_bank(member("concepts_low"), member("concepts_high"));
  auto& b = ds.bundle;
  b.features = fmat::read(member("features"));
  b.p_low = fmat::read(member("p_low"));
  b.p_high = fmat::read(member("p_high"));

  const auto label_lines = text::read_lines(member("labels"));
  for (std::size_t i = 0; i < label_lines.size(); ++i) {
    if (text::trim(label_lines[i]).empty()) continue;
    const auto fields = text::split_ws(label_lines[i]);
    require(fields.size() == 2, ErrorKind::format, "labels line " + std::to_string(i + 1) + ": expected 'low high'");
    b.low_labels.push_back(text::parse_int<std::size_t>(fields[0], "low label"));
    b.high_labels.push_back(text::parse_int<std::size_t>(fields[1], "high label"));
  }
  bool any_thumb = false;
  for (const auto& entry : kv.all("sample")) {
    const auto fields = text::split(entry, '\t');
    b.sample_ids.push_back(text::trim(fields[0]));
    b.thumbnails.push_back(fields.size() > 1 ? text::trim(fields[1]) : std::string());
    any_thumb = any_thumb || !b.thumbnails.back().empty();
  }
  if (!any_thumb) b.thumbnails.clear();
  validate(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic fixture

struct SynthConfig {
  std::size_t n_high = 3;
  std::size_t low_per_high = 2;
  std::size_t samples_per_low = 50;
  std::size_t dim = 16;
  std::size_t height = 4;
  std::size_t width = 4;
  double noise = 0.1;        ///< std of class-signal jitter and of P-target noise
  double label_noise = 0.0;  ///< fraction of samples whose low label is reassigned
  double clutter = 0.5;      ///< std of background feature vectors
  double high_separation = 2.0;
  double low_separation = 1.0;
  std::uint64_t seed = 7;
};

inline std::string low_class_name(std::size_t h, std::size_t j) {
  return "subclass_" + std::to_string(h) + "_" + std::to_string(j);
}
inline std::string high_class_name(std::size_t h) { return "category_" + std::to_string(h); }

/// Desk-scale dataset with planted hierarchy: one Gaussian cluster per low
/// class, low clusters under a high class sharing a common offset, the class
/// signal placed in a random object window over background clutter, and one
/// planted concept per class at each level.
inline Dataset gen_synthetic(const SynthConfig& cfg) {
  require(cfg.n_high >= 1 && cfg.low_per_high >= 1 && cfg.samples_per_low >= 1 && cfg.dim >= 1 &&
              cfg.height >= 1 && cfg.width >= 1,
          ErrorKind::invalid_argument, "synthetic config counts must be >= 1");
  require(cfg.noise >= 0 && cfg.clutter >= 0 && cfg.label_noise >= 0 && cfg.label_noise <= 1,
          ErrorKind::invalid_argument, "synthetic noise levels must be non-negative (label_noise <= 1)");

  const std::size_t kh = cfg.n_high, kl = kh * cfg.low_per_high, d = cfg.dim;
  const std::size_t n = kl * cfg.samples_per_low, hw = cfg.height * cfg.width;

  Dataset ds;
  std::vector<std::string> low_names, high_names;
  std::vector<std::pair<std::size_t, std::size_t>> parents;
  for (std::size_t h = 0; h < kh; ++h) {
    high_names.push_back(high_class_name(h));
    for (std::size_t j = 0; j < cfg.low_per_high; ++j) {
      parents.emplace_back(low_names.size(), h);
      low_names.push_back(low_class_name(h, j));
    }
  }
  ds.taxonomy = build_taxonomy(low_names, high_names, parents);
  for (std::size_t l = 0; l < kl; ++l) {
    ds.bank.low.names.push_back("planted low cue " + std::to_string(l));
    ds.bank.low.provenance.push_back("synthetic");
  }
  for (std::size_t h = 0; h < kh; ++h) {
    ds.bank.high.names.push_back("planted high cue " + std::to_string(h));
    ds.bank.high.provenance.push_back("synthetic");
  }

  CounterRng center_rng(cfg.seed, 1);
  std::vector<std::vector<double>> high_offset(kh, std::vector<double>(d));
  for (auto& v : high_offset)
    for (double& x : v) x = cfg.high_separation * center_rng.normal();
  std::vector<std::vector<double>> low_center(kl, std::vector<double>(d));
  for (std::size_t l = 0; l < kl; ++l)
    for (std::size_t c = 0; c < d; ++c)
      low_center[l][c] = high_offset[ds.taxonomy.parent(l)][c] + cfg.low_separation * center_rng.normal();

  const std::size_t win_h = (cfg.height + 1) / 2, win_w = (cfg.width + 1) / 2;
  const double amplify = static_cast<double>(hw) / static_cast<double>(win_h * win_w);

  auto& b = ds.bundle;
  b.features = Tensor(Shape{n, cfg.height, cfg.width, d});
  b.p_low = Tensor::matrix(n, kl);
  b.p_high = Tensor::matrix(n, kh);
  CounterRng sample_rng(cfg.seed, 2);
  CounterRng label_rng(cfg.seed, 3);
  std::vector<double> signal(d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t l = i / cfg.samples_per_low, h = ds.taxonomy.parent(l);
    for (std::size_t c = 0; c < d; ++c) signal[c] = low_center[l][c] + cfg.noise * sample_rng.normal();
    const std::size_t top = sample_rng.index(cfg.height - win_h + 1);
    const std::size_t left = sample_rng.index(cfg.width - win_w + 1);
    auto x = b.features.row(i);
    for (std::size_t r = 0; r < cfg.height; ++r)
      for (std::size_t q = 0; q < cfg.width; ++q) {
        const bool inside = r >= top && r < top + win_h && q >= left && q < left + win_w;
        double* cell = &x[(r * cfg.width + q) * d];
        for (std::size_t c = 0; c < d; ++c)
          cell[c] = inside ? amplify * signal[c] : cfg.clutter * sample_rng.normal();
      }
    for (std::size_t k = 0; k < kl; ++k) b.p_low(i, k) = (k == l ? 1.0 : 0.0) + cfg.noise * sample_rng.normal();
    for (std::size_t k = 0; k < kh; ++k) b.p_high(i, k) = (k == h ? 1.0 : 0.0) + cfg.noise * sample_rng.normal();

    std::size_t observed_low = l;
    if (kl > 1 && label_rng.uniform() < cfg.label_noise) {
      observed_low = label_rng.index(kl - 1);
      if (observed_low >= l) ++observed_low;
    }
    b.low_labels.push_back(observed_low);
    b.high_labels.push_back(h);
    char id[32];
    std::snprintf(id, sizeof(id), "s%05zu", i);
    b.sample_ids.emplace_back(id);
  }
  validate(ds);
  return ds;
}

}  // namespace hilcbm
