#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

#include "hilcbm/dataset.hpp"
#include "hilcbm/explain.hpp"
#include "hilcbm/model.hpp"
#include "hilcbm/pipeline.hpp"

namespace hilcbm::fixtures {

/// Fresh scratch directory, unique per process and name.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("hilcbm_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// 3 high x 2 low x 50 samples, noise 0.1, seed 7.
inline const Dataset& clean_fixture() {
  static const Dataset ds = gen_synthetic(SynthConfig{});
  return ds;
}

/// Weakly separated classes with 40% of low labels reassigned, so that
/// independently trained heads disagree with the taxonomy on some samples.
inline SynthConfig noisy_config(std::uint64_t seed = 7) {
  SynthConfig c;
  c.noise = 0.5;
  c.label_noise = 0.4;
  c.high_separation = 0.6;
  c.low_separation = 0.3;
  c.clutter = 1.5;
  c.seed = seed;
  return c;
}

inline const Dataset& noisy_fixture() {
  static const Dataset ds = gen_synthetic(noisy_config());
  return ds;
}

/// Full default pipeline on the clean fixture, trained once per binary.
inline const PipelineResult& trained_clean() {
  static const PipelineResult r = run_pipeline(clean_fixture(), PipelineConfig{});
  return r;
}

inline ExplainRequest with_k(std::size_t k, std::optional<std::size_t> class_low = std::nullopt) {
  ExplainRequest r;
  r.k = k;
  r.class_low = class_low;
  return r;
}

/// Hand-built model: "golden retriever" and "black labrador" under "dog",
/// "tabby" under "cat". Low concept 0 ("golden fur") is +1 on retrievers and
/// -1 on labradors and alone separates the two dog breeds. Features are [3]
/// vectors that pass straight through to standardized concepts.
inline HilModel two_class_model() {
  HilModel m;
  m.taxonomy = build_taxonomy({"golden retriever", "black labrador", "tabby"}, {"dog", "cat"}, std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 0}, {2, 1}});
  m.bank.low = ConceptSet{{"golden fur", "whiskers", "striped coat"}, {"fixture", "fixture", "fixture"}};
  m.bank.high = ConceptSet{{"barks", "meows"}, {"fixture", "fixture"}};
  m.layers.w_low = Tensor(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  m.layers.w_high = Tensor(Shape{2, 3}, {0, -1, 0, 0, 1, 1});
  m.layers.stats_low = ActStats{{0, 0, 0}, {1, 1, 1}};
  m.layers.stats_high = ActStats{{0, 0}, {1, 1}};
  SparseHead low{Tensor(Shape{3, 3}, {2, 0, 0, -2, 0, 0, 0, 1, 2}), Tensor(Shape{3}, {0, 0, -1}), {}, 0.0007, 0.99};
  SparseHead high{Tensor(Shape{2, 2}, {2, 0, 0, 2}), Tensor(Shape{2}, {0, 0}), {}, 0.0007, 0.99};
  low.refresh_mask();
  high.refresh_mask();
  m.head_low = low;
  m.head_high = high;
  m.stage = Stage::joint;
  return m;
}

/// A retriever sample of the hand-built model: golden fur, no whiskers.
inline Tensor retriever_sample() { return Tensor(Shape{3}, {1.0, -1.0, 0.0}); }

}  // namespace hilcbm::fixtures
