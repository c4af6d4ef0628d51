#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <cstring>
#include <limits>

#include "helpers.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/intervention.hpp"
#include "reference.hpp"

using namespace neuronscope;
using testing_support::random_model;
using testing_support::small_config;

namespace {

std::size_t tensor_index(const Params<float>& p, const std::string& name) {
  const auto t = named_tensors(p);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].first == name) return i;
  }
  throw std::runtime_error("no tensor " + name);
}

NeuronSet make_set(std::vector<NeuronId> ids) {
  NeuronSet s;
  s.language = "ko";
  std::sort(ids.begin(), ids.end());
  s.neurons = std::move(ids);
  return s;
}

std::vector<TokenSequence> tiny_dataset(const ModelConfig& c, int n, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) out.push_back(testing_support::random_tokens(c, len, rng));
  return out;
}

double next_token_accuracy(const Model& m, const std::vector<TokenSequence>& data) {
  std::size_t hit = 0, total = 0;
  for (const auto& seq : data) {
    const LayerTrace t = forward(m, seq);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      Eigen::Index best = 0;
      t.logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      hit += best == seq.ids[i + 1];
      ++total;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

TEST(InterventionMask, CoversExactlyTheNeuronParameters) {
  const auto c = small_config(2, 8, 12, 2, 8, 20, 10);
  const Model m = random_model(c, 1);
  const InterventionMask mask(c, std::vector<NeuronId>{{1, Submodule::ffn_up, 3},
                                                       {0, Submodule::ffn_down, 5},
                                                       {1, Submodule::attn_k, 2}});
  const std::size_t gate = tensor_index(m.params, "layers.1.w_gate");
  const std::size_t up = tensor_index(m.params, "layers.1.w_up");
  const std::size_t down = tensor_index(m.params, "layers.0.w_down");
  const std::size_t wk = tensor_index(m.params, "layers.1.wk");
  for (int r = 0; r < c.d_model; ++r) {
    EXPECT_TRUE(mask.covers(gate, static_cast<std::size_t>(r * c.d_inter + 3)));
    EXPECT_TRUE(mask.covers(up, static_cast<std::size_t>(r * c.d_inter + 3)));
    EXPECT_FALSE(mask.covers(up, static_cast<std::size_t>(r * c.d_inter + 4)));
    EXPECT_TRUE(mask.covers(down, static_cast<std::size_t>(5 * c.d_model + r)));
    EXPECT_TRUE(mask.covers(wk, static_cast<std::size_t>(r * c.d_mid + 2)));
  }
  EXPECT_EQ(mask.parameter_count(), static_cast<std::size_t>(4 * c.d_model));
  EXPECT_EQ(mask.layers()[1].gate_up_cols, std::vector<int>{3});
}

TEST(InterventionMask, RejectsDuplicatesAndBadIds) {
  const auto c = small_config();
  EXPECT_THROW(InterventionMask(c, std::vector<NeuronId>{{0, Submodule::ffn_up, 1}, {0, Submodule::ffn_up, 1}}),
               ArgumentError);
  EXPECT_THROW(InterventionMask(c, std::vector<NeuronId>{{0, Submodule::ffn_up, c.d_inter}}), ArgumentError);
  EXPECT_THROW(InterventionMask(c, std::vector<NeuronId>{{c.n_layers, Submodule::attn_q, 0}}), ArgumentError);
}

TEST(InterventionMask, AllCoversEveryParameter) {
  const auto c = small_config();
  const Model m = random_model(c, 1);
  std::size_t total = 0;
  for (const auto& [name, t] : named_tensors(m.params)) total += static_cast<std::size_t>(t->size());
  EXPECT_EQ(InterventionMask::all(c).parameter_count(), total);
}

TEST(Deactivate, MatchesOracleWithZeroedWeights) {
  const auto c = small_config(2, 8, 12, 2, 8, 20, 10);
  const Model m = random_model(c, 4);
  const std::vector<NeuronId> ids = {{0, Submodule::attn_q, 1}, {0, Submodule::attn_v, 6},
                                     {1, Submodule::ffn_up, 2}, {1, Submodule::ffn_down, 9}};
  const Model off = deactivate(m, ids);
  auto ref = reference::from_model(m);
  for (const auto& n : ids) reference::zero(ref.layers[static_cast<std::size_t>(n.layer)], n.submodule, n.index);
  std::mt19937_64 rng(3);
  const auto tokens = testing_support::random_tokens(c, 8, rng);
  const auto expect = reference::logits(ref, tokens.ids);
  const LayerTrace got = forward(off, tokens);
  for (std::size_t t = 0; t < expect.size(); ++t) {
    for (std::size_t v = 0; v < expect[t].size(); ++v) {
      EXPECT_NEAR(got.logits(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)), expect[t][v], 1e-10);
    }
  }
  // Untouched neighbours survive.
  EXPECT_EQ(off.params.layers[1].w_up.col(3), m.params.layers[1].w_up.col(3));
  EXPECT_TRUE(off.params.layers[1].w_up.col(2).isZero(0.0));
}

TEST(TuneNeurons, FrozenParametersStayBitIdentical) {
  const auto c = small_config(2, 8, 12, 2, 8, 20, 10);
  const Model m = random_model(c, 5);
  const NeuronSet set = make_set({{0, Submodule::ffn_up, 1}, {1, Submodule::attn_q, 3}, {1, Submodule::ffn_down, 7}});
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  const auto result = tune_neurons(m, set, tiny_dataset(c, 8, 8, 2), cfg);
  ASSERT_EQ(result.steps_run, 200);
  const InterventionMask mask(c, set);
  const auto before = named_tensors(m.params);
  const auto after = named_tensors(result.model.params);
  std::size_t changed = 0;
  for (std::size_t t = 0; t < before.size(); ++t) {
    for (Eigen::Index i = 0; i < before[t].second->size(); ++i) {
      const float a = before[t].second->data()[i];
      const float b = after[t].second->data()[i];
      if (mask.covers(t, static_cast<std::size_t>(i))) {
        changed += a != b;
      } else {
        ASSERT_EQ(std::memcmp(&a, &b, sizeof a), 0) << before[t].first << "[" << i << "]";
      }
    }
  }
  EXPECT_GT(changed, 0u);
}

TEST(TuneNeurons, GradientMatchesFiniteDifferences) {
  const auto c = small_config(2, 8, 12, 2, 8, 20, 10);
  const Model m = random_model(c, 6);
  const NeuronSet set = make_set({{0, Submodule::attn_k, 0}, {0, Submodule::ffn_up, 4}, {1, Submodule::attn_v, 5},
                                  {1, Submodule::ffn_down, 11}});
  std::mt19937_64 rng(7);
  const auto r = grad_check(m, set, testing_support::random_tokens(c, 8, rng), 3, 64);
  EXPECT_FALSE(r.entries.empty());
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(TuneNeurons, MaskedGradientZeroOutsideMask) {
  const auto c = small_config();
  const Model m = random_model(c, 6);
  const InterventionMask mask(c, std::vector<NeuronId>{{0, Submodule::ffn_up, 2}});
  std::mt19937_64 rng(7);
  const Params<double> g = masked_gradient(m, mask, testing_support::random_tokens(c, 8, rng));
  const auto t = named_tensors(g);
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (Eigen::Index k = 0; k < t[i].second->size(); ++k) {
      if (!mask.covers(i, static_cast<std::size_t>(k))) ASSERT_EQ(t[i].second->data()[k], 0.0);
    }
  }
}

TEST(TuneNeurons, OverfitsTinyDataset) {
  const auto c = small_config(2, 16, 32, 2, 16, 16, 8);
  const Model m = init_random(c, 8);
  std::vector<NeuronId> ids;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int k = 0; k < c.d_inter; ++k) {
      ids.push_back({l, Submodule::ffn_up, k});
      ids.push_back({l, Submodule::ffn_down, k});
    }
  }
  const auto data = tiny_dataset(c, 4, 8, 11);
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  const auto result = tune_neurons(m, make_set(ids), data, cfg);
  EXPECT_LT(result.loss_curve.back(), result.loss_curve.front());
  EXPECT_GE(next_token_accuracy(result.model, data), 0.8);
}

TEST(TuneNeurons, NonFiniteLossIsNumericError) {
  const auto c = small_config();
  Model m = random_model(c, 9);
  m.params.layers[0].w_up(0, 0) = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.steps = 3;
  EXPECT_THROW(tune_neurons(m, make_set({{0, Submodule::ffn_up, 0}}), tiny_dataset(c, 4, 6, 1), cfg), NumericError);
}

TEST(TrainConfig, ValidatesAndRoundTrips) {
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.steps = 7;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  EXPECT_EQ(back.learning_rate, 0.5);
  EXPECT_EQ(back.optimizer, OptimizerKind::sgd);
  EXPECT_EQ(back.steps, 7);
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TuneNeurons, ProvenanceRecordsRun) {
  const auto c = small_config();
  const Model m = random_model(c, 10);
  const NeuronSet set = make_set({{0, Submodule::ffn_up, 0}});
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.seed = 17;
  const auto result = tune_neurons(m, set, tiny_dataset(c, 4, 6, 1), cfg);
  const auto j = provenance_json(set, cfg, result);
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 17u);
  EXPECT_EQ(j.at("loss_curve").size(), 5u);
  EXPECT_EQ(NeuronSet::from_json(j.at("neuron_set")).neurons, set.neurons);
}
