#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/importance.hpp"
#include "reference.hpp"

using namespace neuronscope;
using testing_support::random_model;
using testing_support::rel_err;
using testing_support::small_config;

namespace {

struct Fixture {
  ModelConfig c = small_config(2, 12, 20, 3, 12, 24, 12);
  Model m = random_model(c, 77);
  Engine engine{m};
  TokenSequence input;
  LayerTrace trace;

  Fixture() {
    std::mt19937_64 rng(5);
    input = testing_support::random_tokens(c, 9, rng);
    trace = engine.forward(input);
  }
};

}  // namespace

TEST(Importance, FfnParallelMatchesScalarOracle) {
  Fixture f;
  const auto ref = reference::from_model(f.m);
  for (int layer = 0; layer < f.c.n_layers; ++layer) {
    const FfnImportance p = importance_ffn_parallel(f.engine, f.trace, layer);
    for (int k = 0; k < f.c.d_inter; ++k) {
      const double up = reference::importance(ref, f.input.ids, {layer, Submodule::ffn_up, k});
      const double down = reference::importance(ref, f.input.ids, {layer, Submodule::ffn_down, k});
      EXPECT_LT(rel_err(p.up(k), up), 1e-9) << layer << ":" << k;
      EXPECT_LT(rel_err(p.down(k), down), 1e-9) << layer << ":" << k;
    }
  }
}

TEST(Importance, AttentionParallelMatchesScalarOracle) {
  Fixture f;
  const auto ref = reference::from_model(f.m);
  for (int layer = 0; layer < f.c.n_layers; ++layer) {
    const AttnImportance p = importance_attn_parallel(f.engine, f.trace, layer);
    for (int k = 0; k < f.c.d_mid; ++k) {
      EXPECT_LT(rel_err(p.q(k), reference::importance(ref, f.input.ids, {layer, Submodule::attn_q, k})), 1e-9);
      EXPECT_LT(rel_err(p.k(k), reference::importance(ref, f.input.ids, {layer, Submodule::attn_k, k})), 1e-9);
      EXPECT_LT(rel_err(p.v(k), reference::importance(ref, f.input.ids, {layer, Submodule::attn_v, k})), 1e-9);
    }
  }
}

TEST(Importance, SequentialMatchesScalarOracle) {
  Fixture f;
  const auto ref = reference::from_model(f.m);
  for (Submodule s : kAllSubmodules) {
    const NeuronId n{1, s, 3};
    EXPECT_LT(rel_err(importance_sequential(f.engine, f.input, n),
                      reference::importance(ref, f.input.ids, n)),
              1e-9)
        << to_string(s);
  }
}

TEST(Importance, BlockOutputMeasureCoincidesForFfn) {
  Fixture f;
  const NeuronId n{0, Submodule::ffn_down, 4};
  EXPECT_DOUBLE_EQ(importance_sequential(f.engine, f.input, n, SequentialMeasure::block_output),
                   importance_sequential(f.engine, f.input, n, SequentialMeasure::native));
}

TEST(Importance, DeltaTensorMatchesLoops) {
  MatrixD q(3, 2), k(3, 2);
  q << 1, 2, 3, 4, 5, 6;
  k << -1, 0.5, 2, 1, 0, 3;
  const auto d = attention_delta(q, k);
  ASSERT_EQ(d.size(), 18u);
  for (int t = 0; t < 3; ++t) {
    for (int s = 0; s < 3; ++s) {
      for (int j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(d[static_cast<std::size_t>((t * 3 + s) * 2 + j)], q(t, j) * k(s, j));
    }
  }
}

TEST(Importance, FirstOrderIsCloseForSmallPerturbations) {
  const auto c = small_config(1, 8, 16, 2, 8, 20, 10);
  const Model m = random_model(c, 3, 0.05);
  const Engine e(m);
  std::mt19937_64 rng(1);
  const auto trace = e.forward(testing_support::random_tokens(c, 8, rng));
  const auto exact = importance_attn_parallel(e, trace, 0, AttnMode::exact);
  const auto approx = importance_attn_parallel(e, trace, 0, AttnMode::first_order);
  for (int k = 0; k < c.d_mid; ++k) EXPECT_LT(rel_err(exact.q(k), approx.q(k)), 0.05);
  EXPECT_LT(attention_approximation_gap(e, trace, 0), 0.05);
  EXPECT_DOUBLE_EQ(exact.v(0), approx.v(0));
}

TEST(Importance, DeltaBudgetIsEnforced) {
  Fixture f;
  EXPECT_THROW(importance_attn_parallel(f.engine, f.trace, 0, AttnMode::exact, 64), ResourceError);
}

TEST(Importance, RejectsBadLayer) {
  Fixture f;
  EXPECT_THROW(importance_ffn_parallel(f.engine, f.trace, f.c.n_layers), ArgumentError);
  EXPECT_THROW(importance_sequential(f.engine, f.input, {0, Submodule::attn_q, f.c.d_mid}), ArgumentError);
}

TEST(ImportanceTable, DeduplicatesAndRoundTrips) {
  Fixture f;
  std::mt19937_64 rng(8);
  std::vector<TokenSequence> corpus = {testing_support::random_tokens(f.c, 6, rng),
                                       testing_support::random_tokens(f.c, 7, rng)};
  corpus.push_back(corpus[0]);
  const auto table = compute_importance_table(f.engine, corpus, "ko", {AttnMode::exact, 2});
  EXPECT_EQ(table.n_inputs(), 2u);
  const auto single = importance_all_layers(f.engine, corpus[1]);
  EXPECT_DOUBLE_EQ(table.at({1, Submodule::attn_v, 2}, 1), single[1][2](2));

  testing_support::TempDir dir;
  table.save(dir / "t.bin");
  const auto back = ImportanceTable::load(dir / "t.bin");
  EXPECT_EQ(back.language, "ko");
  EXPECT_EQ(back.n_inputs(), 2u);
  for (int l = 0; l < f.c.n_layers; ++l) {
    for (Submodule s : kAllSubmodules) EXPECT_EQ(back.family(l, s), table.family(l, s));
  }
}

TEST(ImportanceTable, ThreadCountDoesNotChangeValues) {
  Fixture f;
  std::mt19937_64 rng(9);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 6; ++i) corpus.push_back(testing_support::random_tokens(f.c, 5 + i % 3, rng));
  const auto a = compute_importance_table(f.engine, corpus, "x", {AttnMode::exact, 1});
  const auto b = compute_importance_table(f.engine, corpus, "x", {AttnMode::exact, 3});
  for (int l = 0; l < f.c.n_layers; ++l) {
    for (Submodule s : kAllSubmodules) EXPECT_EQ(a.family(l, s), b.family(l, s));
  }
}
