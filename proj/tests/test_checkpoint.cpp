#include <gtest/gtest.h>

#include "hilcbm/explain.hpp"
#include "hilcbm/model.hpp"
#include "support.hpp"

using namespace hilcbm;
using namespace hilcbm::fixtures;

TEST(Checkpoint, RoundTripIsExact) {
  const HilModel& m = trained_clean().model;
  const auto dir = scratch_dir("ckpt_roundtrip");
  checkpoint::save(m, dir);
  const HilModel back = checkpoint::load(dir);
  EXPECT_EQ(back, m);
  EXPECT_EQ(checkpoint::fingerprint(back), checkpoint::fingerprint(m));
  const auto& b = clean_fixture().bundle;
  for (Level level : {Level::low, Level::high}) {
    const Tensor x = standardized_concepts(m, b.features, level);
    EXPECT_EQ(head_logits(back.head(level), standardized_concepts(back, b.features, level)), head_logits(m.head(level), x));
  }
  EXPECT_EQ(back.hyper.lambda_vis, 0.7);
  EXPECT_EQ(back.hyper.lambda_semantic, 0.1);
  EXPECT_EQ(back.stage, Stage::joint);
}

TEST(Checkpoint, SavingTwiceGivesIdenticalBytes) {
  const HilModel& m = trained_clean().model;
  const auto a = scratch_dir("ckpt_bytes_a"), b = scratch_dir("ckpt_bytes_b");
  checkpoint::save(m, a);
  checkpoint::save(m, b);
  for (const auto& entry : std::filesystem::directory_iterator(a))
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path().filename();
}

TEST(Checkpoint, MissingBlobIsReported) {
  const auto dir = scratch_dir("ckpt_missing");
  checkpoint::save(trained_clean().model, dir);
  std::filesystem::remove(dir / "W_F_high.fmat");
  try {
    checkpoint::load(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_blob);
    EXPECT_NE(std::string(e.what()).find("W_F_high"), std::string::npos);
  }
}

TEST(Checkpoint, VersionMismatchIsReported) {
  const auto dir = scratch_dir("ckpt_version");
  checkpoint::save(trained_clean().model, dir);
  std::string text = slurp(dir / checkpoint::kManifest);
  const auto at = text.find("version = 1");
  ASSERT_NE(at, std::string::npos);
  text.replace(at, 11, "version = 2");
  text::write_file(dir / checkpoint::kManifest, text);
  try {
    checkpoint::load(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::version);
  }
}

TEST(Checkpoint, ConceptStageCheckpointHasNoHeads) {
  PipelineConfig cfg;
  cfg.cbl.steps = 20;
  const HilModel m = train_cbl_stage(clean_fixture(), cfg).model;
  const auto dir = scratch_dir("ckpt_partial");
  checkpoint::save(m, dir);
  EXPECT_FALSE(std::filesystem::exists(dir / "W_F_low.fmat"));
  const HilModel back = checkpoint::load(dir);
  EXPECT_EQ(back, m);
  EXPECT_FALSE(back.complete());
  try {
    predict_hier(back, sample_features(clean_fixture().bundle, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::incomplete_model);
  }
}

TEST(Checkpoint, HighClassIdsSurviveReordering) {
  // Low classes listed so that first appearance of the high classes differs
  // from their ids.
  HilModel m = trained_clean().model;
  m.taxonomy = build_taxonomy({"a", "b", "c", "d", "e", "f"}, {"x", "y", "z"}, std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {1, 1}, {2, 0}, {3, 2}, {4, 1}, {5, 0}});
  const auto dir = scratch_dir("ckpt_order");
  checkpoint::save(m, dir);
  EXPECT_EQ(checkpoint::load(dir).taxonomy, m.taxonomy);
}

TEST(Checkpoint, FingerprintTracksContent) {
  HilModel m = trained_clean().model;
  const auto before = checkpoint::fingerprint(m);
  m.head_low->weight[0] += 1e-12;
  EXPECT_NE(checkpoint::fingerprint(m), before);
}

TEST(Checkpoint, MissingManifest) {
  const auto dir = scratch_dir("ckpt_none");
  try {
    checkpoint::load(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}
