#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hilcbm/cbl_trainer.hpp"
#include "hilcbm/concept_bank.hpp"
#include "hilcbm/error.hpp"
#include "hilcbm/fmat.hpp"
#include "hilcbm/objectives.hpp"
#include "hilcbm/sparse_glm.hpp"
#include "hilcbm/taxonomy.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"

namespace hilcbm {

struct Hyperparameters {
  double lambda = 0.0007;
  double alpha = 0.99;
  double lambda_vis = 0.7;
  double lambda_semantic = 0.1;
  std::uint64_t seed = 7;
  VisualVariant visual_variant = VisualVariant::mse;

  friend bool operator==(const Hyperparameters&, const Hyperparameters&) = default;
};

/// How far training has progressed. Later stages imply the earlier ones.
enum class Stage { concepts, heads, joint };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::concepts: return "concepts";
    case Stage::heads: return "heads";
    case Stage::joint: return "joint";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  if (s == "concepts") return Stage::concepts;
  if (s == "heads") return Stage::heads;
  if (s == "joint") return Stage::joint;
  fail(ErrorKind::format, "unknown stage '" + std::string(s) + "'");
}

struct HilModel {
  Taxonomy taxonomy;
  ConceptBank bank;
  ConceptLayers layers;
  std::optional<SparseHead> head_low;
  std::optional<SparseHead> head_high;
  Hyperparameters hyper;
  Stage stage = Stage::concepts;

  bool complete() const { return head_low.has_value() && head_high.has_value(); }

  const SparseHead& head(Level level) const {
    require(complete(), ErrorKind::incomplete_model, "model has no classifier heads; run train-heads first");
    return level == Level::low ? *head_low : *head_high;
  }

  std::size_t concept_count(Level level) const { return bank.at(level).size(); }

  /// Concept provenance is bookkeeping and does not take part in equality.
  friend bool operator==(const HilModel& a, const HilModel& b) {
    return a.taxonomy == b.taxonomy && a.bank.low.names == b.bank.low.names && a.bank.high.names == b.bank.high.names &&
           a.layers == b.layers && a.head_low == b.head_low && a.head_high == b.head_high && a.hyper == b.hyper &&
           a.stage == b.stage;
  }
};

inline void require_complete(const HilModel& model) {
  require(model.complete(), ErrorKind::incomplete_model, "model has no classifier heads; run train-heads first");
}

namespace checkpoint {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr const char* kManifest = "manifest.txt";

namespace detail {

inline Tensor vector_tensor(const std::vector<double>& v) { return Tensor(Shape{v.size()}, v); }

inline Tensor mask_tensor(const SparseHead& h) {
  Tensor t(h.weight.shape());
  for (std::size_t i = 0; i < h.zero_mask.size(); ++i) t[i] = h.zero_mask[i];
  return t;
}

inline std::vector<std::pair<std::string, Tensor>> blobs(const HilModel& m) {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"W_c_low", m.layers.w_low},
      {"W_c_high", m.layers.w_high},
      {"act_mean_low", vector_tensor(m.layers.stats_low.mean)},
      {"act_std_low", vector_tensor(m.layers.stats_low.std)},
      {"act_mean_high", vector_tensor(m.layers.stats_high.mean)},
      {"act_std_high", vector_tensor(m.layers.stats_high.std)},
  };
  if (m.complete()) {
    out.emplace_back("W_F_low", m.head_low->weight);
    out.emplace_back("b_F_low", m.head_low->bias);
    out.emplace_back("mask_low", mask_tensor(*m.head_low));
    out.emplace_back("W_F_high", m.head_high->weight);
    out.emplace_back("b_F_high", m.head_high->bias);
    out.emplace_back("mask_high", mask_tensor(*m.head_high));
  }
  return out;
}

}  // namespace detail

inline text::KeyValueFile manifest(const HilModel& m) {
  text::KeyValueFile kv;
  kv.add("format", "hilcbm-checkpoint");
  kv.add("version", std::to_string(kVersion));
  kv.add("stage", std::string(to_string(m.stage)));
  kv.add("classes_low", std::to_string(m.taxonomy.low_count()));
  kv.add("classes_high", std::to_string(m.taxonomy.high_count()));
  kv.add("concepts_low", std::to_string(m.bank.low.size()));
  kv.add("concepts_high", std::to_string(m.bank.high.size()));
  kv.add("feature_dim", std::to_string(m.layers.w_low.rank() == 2 ? m.layers.w_low.dim(1) : 0));
  kv.add("lambda", text::format_double(m.hyper.lambda));
  kv.add("alpha", text::format_double(m.hyper.alpha));
  kv.add("lambda_vis", text::format_double(m.hyper.lambda_vis));
  kv.add("lambda_semantic", text::format_double(m.hyper.lambda_semantic));
  kv.add("seed", std::to_string(m.hyper.seed));
  kv.add("visual_variant", std::string(to_string(m.hyper.visual_variant)));
  kv.add("taxonomy_file", "taxonomy.tsv");
  kv.add("concepts_low_file", "concepts_low.txt");
  kv.add("concepts_high_file", "concepts_high.txt");
  for (const auto& name : m.taxonomy.high_names()) kv.add("high_class", name);
  for (const auto& [name, t] : detail::blobs(m)) kv.add("blob", name + " " + name + ".fmat " + shape_string(t.shape()));
  return kv;
}

/// Writes manifest.txt, one FMAT file per blob, and the text side files.
inline void save(const HilModel& m, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  for (const auto& [name, t] : detail::blobs(m)) fmat::write(t, dir / (name + ".fmat"));
  text::write_file(dir / "taxonomy.tsv", render_taxonomy(m.taxonomy));
  text::write_file(dir / "concepts_low.txt", render_concept_list(m.bank.low));
  text::write_file(dir / "concepts_high.txt", render_concept_list(m.bank.high));
  text::write_file(dir / kManifest, manifest(m).render());
}

inline HilModel load(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifest;
  require(std::filesystem::exists(manifest_path), ErrorKind::io, "no checkpoint manifest at " + manifest_path.string());
  const auto kv = text::KeyValueFile::load(manifest_path);
  require(kv.get("format") == "hilcbm-checkpoint", ErrorKind::format, "not a checkpoint manifest: " + manifest_path.string());
  const auto version = text::parse_int<std::uint32_t>(kv.get("version"), "version");
  require(version == kVersion, ErrorKind::version,
          "checkpoint version " + std::to_string(version) + " is not supported (expected " + std::to_string(kVersion) + ")");

  HilModel m;
  m.stage = parse_stage(kv.get("stage"));
  m.hyper.lambda = text::parse_double(kv.get("lambda"), "lambda");
  m.hyper.alpha = text::parse_double(kv.get("alpha"), "alpha");
  m.hyper.lambda_vis = text::parse_double(kv.get("lambda_vis"), "lambda_vis");
  m.hyper.lambda_semantic = text::parse_double(kv.get("lambda_semantic"), "lambda_semantic");
  m.hyper.seed = text::parse_int<std::uint64_t>(kv.get("seed"), "seed");
  m.hyper.visual_variant = parse_visual_variant(kv.get("visual_variant"));
  m.taxonomy = load_taxonomy(dir / kv.get("taxonomy_file"));
  // The TSV numbers high classes by first appearance; restore the saved ids.
  if (const auto order = kv.all("high_class"); !order.empty() && order != m.taxonomy.high_names()) {
    require(order.size() == m.taxonomy.high_count(), ErrorKind::format, "high_class list disagrees with the taxonomy file");
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t l = 0; l < m.taxonomy.low_count(); ++l) {
      const auto& parent_name = m.taxonomy.high_names()[m.taxonomy.parent(l)];
      const auto it = std::find(order.begin(), order.end(), parent_name);
      require(it != order.end(), ErrorKind::format, "high class '" + parent_name + "' missing from high_class list");
      pairs.emplace_back(l, static_cast<std::size_t>(it - order.begin()));
    }
    m.taxonomy = build_taxonomy(m.taxonomy.low_names(), order, pairs);
  }
  m.bank.low = load_concept_list(dir / kv.get("concepts_low_file"));
  m.bank.high = load_concept_list(dir / kv.get("concepts_high_file"));

  std::vector<std::pair<std::string, std::string>> listed;
  for (const auto& line : kv.all("blob")) {
    const auto parts = text::split_ws(line);
    require(parts.size() >= 2, ErrorKind::format, "malformed blob entry '" + line + "'");
    listed.emplace_back(parts[0], parts[1]);
  }
  auto blob = [&](const std::string& name) {
    for (const auto& [n, file] : listed) {
      if (n != name) continue;
      const auto path = dir / file;
      require(std::filesystem::exists(path), ErrorKind::missing_blob, "blob " + name + " missing: " + path.string());
      return fmat::read(path);
    }
    fail(ErrorKind::missing_blob, "checkpoint manifest does not list blob " + name);
  };
  auto vec = [&](const std::string& name) {
    const Tensor t = blob(name);
    return std::vector<double>(t.values().begin(), t.values().end());
  };

  m.layers.w_low = blob("W_c_low");
  m.layers.w_high = blob("W_c_high");
  m.layers.stats_low = ActStats{vec("act_mean_low"), vec("act_std_low")};
  m.layers.stats_high = ActStats{vec("act_mean_high"), vec("act_std_high")};
  require(m.layers.w_low.rank() == 2 && m.layers.w_low.dim(0) == m.bank.low.size() &&
              m.layers.w_high.rank() == 2 && m.layers.w_high.dim(0) == m.bank.high.size(),
          ErrorKind::shape_mismatch, "concept layer shapes disagree with the concept lists");

  if (m.stage != Stage::concepts) {
    auto head = [&](const std::string& suffix, std::size_t classes, std::size_t concepts) {
      SparseHead h;
      h.weight = blob("W_F_" + suffix);
      h.bias = blob("b_F_" + suffix);
      const Tensor mask = blob("mask_" + suffix);
      require(h.weight.shape() == Shape{classes, concepts} && h.bias.shape() == Shape{classes} &&
                  mask.shape() == h.weight.shape(),
              ErrorKind::shape_mismatch, "head " + suffix + " has unexpected shape " + shape_string(h.weight.shape()));
      h.zero_mask.resize(mask.size());
      for (std::size_t i = 0; i < mask.size(); ++i) h.zero_mask[i] = mask[i] != 0.0;
      h.lambda = m.hyper.lambda;
      h.alpha = m.hyper.alpha;
      return h;
    };
    m.head_low = head("low", m.taxonomy.low_count(), m.bank.low.size());
    m.head_high = head("high", m.taxonomy.high_count(), m.bank.high.size());
  }
  return m;
}

/// Content hash over every blob and side file; equal models hash equally.
inline std::uint64_t fingerprint(const HilModel& m) {
  std::uint64_t h = text::fnv1a(manifest(m).render());
  for (const auto& [name, t] : detail::blobs(m)) h = text::fnv1a(fmat::encode(t), text::fnv1a(name, h));
  h = text::fnv1a(render_taxonomy(m.taxonomy), h);
  h = text::fnv1a(render_concept_list(m.bank.low), h);
  return text::fnv1a(render_concept_list(m.bank.high), h);
}

}  // namespace checkpoint
}  // namespace hilcbm
