#include <gtest/gtest.h>

#include <thread>

#include "hilcbm/intervention.hpp"
#include "support.hpp"

using namespace hilcbm;
using namespace hilcbm::fixtures;

namespace {

std::shared_ptr<const HilModel> fixture_model() {
  static const auto m = std::make_shared<const HilModel>(two_class_model());
  return m;
}

std::shared_ptr<const HilModel> trained_model() {
  static const auto m = std::make_shared<const HilModel>(trained_clean().model);
  return m;
}

}  // namespace

TEST(Session, FreshSessionMatchesBase) {
  Session s("a", trained_model());
  const auto& b = clean_fixture().bundle;
  for (std::size_t i = 0; i < b.size(); i += 10) {
    const Tensor x = sample_features(b, i);
    EXPECT_EQ(s.predict(x), predict_hier(*trained_model(), x));
    const auto ex = s.repredict(x), base = explain_hier(*trained_model(), x);
    EXPECT_EQ(ex.prediction, base.prediction);
    EXPECT_EQ(ex.low, base.low);
    EXPECT_EQ(ex.high, base.high);
  }
  EXPECT_TRUE(s.state().overlay.empty());
}

TEST(Session, IncompleteModelIsRejected) {
  auto m = std::make_shared<HilModel>(two_class_model());
  m->head_low.reset();
  try {
    Session s("x", m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::incomplete_model);
  }
}

TEST(Session, SessionsAreIndependent) {
  Session a("a", fixture_model()), b("b", fixture_model());
  a.edit_weight(Level::low, 1, 0, 3.0);
  EXPECT_EQ(a.predict(retriever_sample()).low.id, 1u);
  EXPECT_EQ(b.predict(retriever_sample()).low.id, 0u);
  EXPECT_TRUE(b.state().overlay.empty());
}

TEST(Session, ResetEqualsFreshOverlay) {
  Session s("a", fixture_model());
  s.edit_weight(Level::low, 1, 0, 3.0);
  s.mask_to_high_class(1);
  s.override_concepts({{Level::high, 0, 0.5}});
  s.reset();
  EXPECT_EQ(s.state().overlay, Session("b", fixture_model()).state().overlay);
  EXPECT_EQ(s.log().back(), "RESET");
  EXPECT_EQ(s.predict(retriever_sample()), predict_hier(*fixture_model(), retriever_sample()));
}

TEST(EditWeight, OneEditFlipsTheLowPrediction) {
  Session s("a", fixture_model());
  ASSERT_EQ(s.predict(retriever_sample()).low.name, "golden retriever");
  s.edit_weight(Level::low, 1, 0, 3.0);
  const auto ex = s.repredict(retriever_sample(), with_k(1));
  EXPECT_EQ(ex.prediction.low.name, "black labrador");
  EXPECT_EQ(ex.prediction.high.name, "dog");
  ASSERT_EQ(ex.low.top.size(), 1u);
  EXPECT_EQ(ex.low.top[0].name, "golden fur");
  EXPECT_EQ(ex.low.top[0].weight, 3.0);
  EXPECT_EQ(ex.low.top[0].contribution, 3.0);
  EXPECT_EQ(s.log(), (std::vector<std::string>{"EDIT low 1 0 3"}));
}

TEST(EditWeight, EditingBackRestoresBase) {
  Session s("a", trained_model());
  const double original = trained_model()->head_low->weight(2, 2);
  s.edit_weight(Level::low, 2, 2, original + 5.0);
  s.edit_weight(Level::low, 2, 2, original);
  const auto& b = clean_fixture().bundle;
  for (std::size_t i = 0; i < b.size(); i += 13) {
    const Tensor x = sample_features(b, i);
    const auto p = s.predict(x), q = predict_hier(*trained_model(), x);
    EXPECT_EQ(p.low, q.low);
    for (std::size_t k = 0; k < p.logits_low.size(); ++k) EXPECT_NEAR(p.logits_low[k], q.logits_low[k], 1e-12);
  }
}

TEST(EditWeight, MaskedZeroCanBeEditedInSession) {
  Session s("a", fixture_model());
  ASSERT_EQ(fixture_model()->head_low->weight(2, 0), 0.0);
  s.edit_weight(Level::low, 2, 0, 10.0);
  EXPECT_EQ(s.head(Level::low).weight(2, 0), 10.0);
  EXPECT_EQ(s.predict(retriever_sample()).low.name, "tabby");
  EXPECT_EQ(fixture_model()->head_low->weight(2, 0), 0.0);
}

TEST(EditWeight, InvalidArguments) {
  Session s("a", fixture_model());
  EXPECT_THROW(s.edit_weight(Level::low, 3, 0, 1.0), Error);
  EXPECT_THROW(s.edit_weight(Level::high, 0, 2, 1.0), Error);
  EXPECT_THROW(s.edit_weight(Level::low, 0, 0, NAN), Error);
  EXPECT_TRUE(s.log().empty());
}

TEST(MaskToHighClass, LowPredictionStaysUnderTheMask) {
  Session s("a", fixture_model());
  s.mask_to_high_class(1);
  const auto p = s.predict(retriever_sample());
  EXPECT_EQ(p.low.name, "tabby");
  EXPECT_EQ(p.high.name, "dog");
  EXPECT_NEAR(p.probs_low[2], 1.0, 1e-12);
  EXPECT_EQ(p.probs_low[0], 0.0);
  Session t("b", fixture_model());
  t.mask_to_high_class(0);
  EXPECT_EQ(t.predict(retriever_sample()).low.id, predict_hier(*fixture_model(), retriever_sample()).low.id);
  EXPECT_THROW(t.mask_to_high_class(2), Error);
}

TEST(MaskToHighClass, SoundForEverySampleAndMask) {
  const auto& b = clean_fixture().bundle;
  const auto& tax = trained_model()->taxonomy;
  for (std::size_t h = 0; h < tax.high_count(); ++h) {
    Session s("m", trained_model());
    s.mask_to_high_class(h);
    const auto allowed = classes_under(h, tax);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto ex = s.repredict(sample_features(b, i));
      EXPECT_EQ(tax.parent(ex.prediction.low.id), h);
      double sum = 0;
      for (auto k : allowed) sum += ex.prediction.probs_low[k];
      EXPECT_NEAR(sum, 1.0, 1e-9);
      EXPECT_EQ(ex.low.class_id, ex.prediction.low.id);
      EXPECT_NEAR(ex.low.residual, 0.0, 1e-9);
    }
  }
}

TEST(OverrideConcepts, AllZeroGivesBiasOnlyPrediction) {
  Session s("a", trained_model());
  std::vector<ConceptOverride> zeros;
  for (Level level : {Level::low, Level::high})
    for (std::size_t c = 0; c < trained_model()->concept_count(level); ++c) zeros.push_back({level, c, 0.0});
  s.override_concepts(zeros);
  const auto p = s.predict(sample_features(clean_fixture().bundle, 0));
  EXPECT_EQ(p.low.id, argmax(trained_model()->head_low->bias.values()));
  EXPECT_EQ(p.high.id, argmax(trained_model()->head_high->bias.values()));
  EXPECT_EQ(s.log().size(), zeros.size());
}

TEST(OverrideConcepts, CounterfactualFurColourFlipsWithinDogs) {
  Session s("a", fixture_model());
  s.override_concepts({{Level::low, 0, -1.0}});
  const auto p = s.predict(retriever_sample());
  EXPECT_EQ(p.low.name, "black labrador");
  EXPECT_EQ(p.high.name, "dog");
  EXPECT_EQ(s.log(), (std::vector<std::string>{"OVERRIDE low 0 -1"}));
}

TEST(OverrideConcepts, EmptyListAndInvalidValues) {
  Session s("a", fixture_model());
  s.override_concepts({});
  EXPECT_TRUE(s.log().empty());
  EXPECT_THROW(s.override_concepts({{Level::low, 3, 0.0}}), Error);
  EXPECT_THROW(s.override_concepts({{Level::low, 0, INFINITY}}), Error);
  EXPECT_TRUE(s.state().overlay.empty());
}

TEST(Session, ReplayReproducesState) {
  Session s("a", trained_model());
  s.edit_weight(Level::low, 1, 4, -0.37);
  s.override_concepts({{Level::high, 2, 1.0 / 3.0}, {Level::low, 0, 2.5}});
  s.mask_to_high_class(2);
  s.reset();
  s.edit_weight(Level::high, 0, 1, 1e-17);
  s.mask_to_high_class(1);
  const auto replayed = Session::replay("b", trained_model(), s.log());
  EXPECT_EQ(replayed->state(), s.state());
  EXPECT_THROW(Session::replay("c", trained_model(), {"EDIT low 0"}), Error);
  EXPECT_THROW(Session::replay("c", trained_model(), {"JUMP"}), Error);
}

TEST(Session, BaseModelIsNeverMutated) {
  const auto before = checkpoint::fingerprint(*trained_model());
  Session s("a", trained_model());
  s.edit_weight(Level::low, 0, 0, 9.0);
  s.mask_to_high_class(1);
  s.override_concepts({{Level::low, 1, 3.0}});
  s.repredict(sample_features(clean_fixture().bundle, 3));
  EXPECT_EQ(checkpoint::fingerprint(*trained_model()), before);
}

TEST(Session, SecondWriterGetsConflict) {
  Session s("a", fixture_model());
  {
    auto hold = s.hold_writer();
    try {
      s.edit_weight(Level::low, 0, 0, 1.0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::conflict);
    }
    EXPECT_EQ(s.predict(retriever_sample()).low.id, 0u);
  }
  s.edit_weight(Level::low, 0, 0, 1.0);
  EXPECT_EQ(s.log().size(), 1u);
}

TEST(Session, ConcurrentWritersNeverLoseWholeEdits) {
  Session s("a", fixture_model());
  std::atomic<int> applied{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int i = 0; i < 200; ++i) {
        try {
          s.edit_weight(Level::low, 0, 1, t * 1000 + i);
          ++applied;
        } catch (const Error& e) {
          EXPECT_EQ(e.kind(), ErrorKind::conflict);
        }
        const auto st = s.state();
        EXPECT_LE(st.overlay.weight_edits.size(), 1u);
      }
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(s.log().size(), static_cast<std::size_t>(applied.load()));
}

TEST(SessionRegistry, IdsAndExpiry) {
  auto now = std::chrono::steady_clock::time_point{};
  SessionRegistry reg(fixture_model(), std::chrono::seconds(60), [&] { return now; });
  const auto a = reg.create();
  EXPECT_EQ(a->id(), "s000001");
  EXPECT_EQ(reg.create()->id(), "s000002");
  now += std::chrono::seconds(50);
  EXPECT_EQ(reg.get("s000001"), a);
  now += std::chrono::seconds(50);
  EXPECT_EQ(reg.get("s000001"), a);
  EXPECT_THROW(reg.get("s000002"), Error);
  now += std::chrono::seconds(61);
  try {
    reg.get("s000001");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::not_found);
  }
  EXPECT_EQ(reg.size(), 0u);
}
