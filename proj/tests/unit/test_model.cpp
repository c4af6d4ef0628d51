#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "neuronscope/engine.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/model.hpp"
#include "reference.hpp"

using namespace neuronscope;
using testing_support::random_model;
using testing_support::small_config;
using testing_support::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

// Rewrites the bundle header through fn, keeping the data section.
void edit_header(const std::filesystem::path& p, const std::function<void(nlohmann::ordered_json&)>& fn) {
  const std::string raw = slurp(p);
  std::uint64_t len = 0;
  std::memcpy(&len, raw.data(), 8);
  auto header = nlohmann::ordered_json::parse(raw.substr(8, len));
  fn(header);
  const std::string h = header.dump();
  std::string out(8, '\0');
  const std::uint64_t n = h.size();
  std::memcpy(out.data(), &n, 8);
  spit(p, out + h + raw.substr(8 + len));
}

}  // namespace

TEST(ModelConfig, RejectsBadDimensions) {
  EXPECT_NO_THROW(small_config().validate());
  auto c = small_config();
  c.d_mid = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.vocab_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  const auto c = small_config(3, 8, 20, 4, 12, 40, 10);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
}

TEST(InitRandom, SameSeedSameWeights) {
  const auto c = small_config();
  EXPECT_TRUE(bit_identical(init_random(c, 7).params, init_random(c, 7).params));
  EXPECT_FALSE(bit_identical(init_random(c, 7).params, init_random(c, 8).params));
}

TEST(Bundle, RoundTripIsBitExact) {
  TempDir dir;
  const Model m = random_model(small_config(), 3);
  save_bundle(m, dir / "m.bundle");
  const Model back = load_bundle(dir / "m.bundle");
  EXPECT_EQ(back.config, m.config);
  EXPECT_TRUE(bit_identical(back.params, m.params));
}

TEST(Bundle, MissingFileIsIoError) {
  try {
    load_bundle("/nonexistent/neuronscope.bundle");
    FAIL();
  } catch (const BundleError& e) {
    EXPECT_EQ(e.kind(), BundleError::Kind::io);
  }
}

TEST(Bundle, TruncatedData) {
  TempDir dir;
  save_bundle(random_model(small_config(), 1), dir / "m.bundle");
  const std::string raw = slurp(dir / "m.bundle");
  spit(dir / "m.bundle", raw.substr(0, raw.size() - 10));
  try {
    load_bundle(dir / "m.bundle");
    FAIL();
  } catch (const BundleError& e) {
    EXPECT_EQ(e.kind(), BundleError::Kind::truncated);
  }
}

TEST(Bundle, MalformedHeader) {
  TempDir dir;
  save_bundle(random_model(small_config(), 1), dir / "m.bundle");
  std::string raw = slurp(dir / "m.bundle");
  raw[9] = '#';
  spit(dir / "m.bundle", raw);
  try {
    load_bundle(dir / "m.bundle");
    FAIL();
  } catch (const BundleError& e) {
    EXPECT_EQ(e.kind(), BundleError::Kind::malformed_header);
  }
}

TEST(Bundle, ShapeDisagreeingWithConfig) {
  TempDir dir;
  save_bundle(random_model(small_config(), 1), dir / "m.bundle");
  edit_header(dir / "m.bundle", [](nlohmann::ordered_json& h) { h["config"]["d_inter"] = 33; });
  try {
    load_bundle(dir / "m.bundle");
    FAIL();
  } catch (const BundleError& e) {
    EXPECT_EQ(e.kind(), BundleError::Kind::shape_mismatch);
  }
}

TEST(Forward, MatchesScalarReference) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const auto c = small_config(1 + trial % 3, 8 + 4 * (trial % 2), 24, 2, 8, 20, 12);
    const Model m = random_model(c, 100 + static_cast<std::uint64_t>(trial));
    const auto tokens = testing_support::random_tokens(c, 9, rng);
    const LayerTrace trace = forward(m, tokens);
    const auto ref = reference::logits(reference::from_model(m), tokens.ids);
    ASSERT_EQ(trace.logits.rows(), 9);
    for (std::size_t t = 0; t < ref.size(); ++t) {
      for (std::size_t v = 0; v < ref[t].size(); ++v) {
        EXPECT_NEAR(trace.logits(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)), ref[t][v], 1e-10);
      }
    }
    EXPECT_EQ(trace.hidden_states.size(), static_cast<std::size_t>(c.n_layers + 1));
    EXPECT_EQ(trace.ffn_activations.size(), static_cast<std::size_t>(c.n_layers));
  }
}

TEST(Forward, AllOnesSingleLayerByHand) {
  // d_model 2, one head of width 2, d_inter 1, all weights 1, vocab of 4.
  ModelConfig c = small_config(1, 2, 1, 1, 2, 4, 4);
  Model m = init_random(c, 0);
  for (auto& [name, t] : named_tensors(m.params)) t->setOnes();
  m.params.position_embedding.setZero();
  // One token: h0 = [1, 1]; RMSNorm leaves it at 1/sqrt(1 + 1e-5) per entry.
  const double r = 1.0 / std::sqrt(1.0 + 1e-5);
  // Attention over itself is the identity mix: v = x W_v = [2r, 2r]; W_O sums -> 4r each.
  const double mid = 1.0 + 4.0 * r;
  const double y = mid / std::sqrt(mid * mid + 1e-5);  // normalized, gain 1
  const double g = 2.0 * y;  // x W_gate with both inputs y
  const double act = g / (1.0 + std::exp(-g)) * g;
  const double h1 = mid + act;
  const double fin = h1 / std::sqrt(h1 * h1 + 1e-5);
  const LayerTrace trace = forward(m, TokenSequence{{1}, std::nullopt});
  for (int v = 0; v < 4; ++v) EXPECT_NEAR(trace.logits(0, v), 2.0 * fin, 1e-12);
  EXPECT_NEAR(trace.hidden_states[1](0, 0), h1, 1e-12);
}

TEST(Forward, LengthAndTokenChecks) {
  const auto c = small_config();
  const Model m = random_model(c, 1);
  TokenSequence too_long;
  too_long.ids.assign(static_cast<std::size_t>(c.max_seq_len) + 1, 5);
  EXPECT_THROW(forward(m, too_long), LengthError);
  EXPECT_THROW(forward(m, TokenSequence{{1, c.vocab_size}, std::nullopt}), ArgumentError);
  EXPECT_THROW(logprobs(m, TokenSequence{{1}, std::nullopt}), LengthError);
}

TEST(Forward, ProbabilitiesSumToOne) {
  const auto c = small_config();
  const Model m = random_model(c, 2);
  std::mt19937_64 rng(2);
  const MatrixD lp = log_softmax_rows(forward(m, testing_support::random_tokens(c, 10, rng)).logits);
  for (Eigen::Index t = 0; t < lp.rows(); ++t) EXPECT_NEAR(lp.row(t).array().exp().sum(), 1.0, 1e-12);
}

TEST(Backward, MatchesFiniteDifferencesInDoublePrecision) {
  const auto c = small_config(2, 8, 12, 2, 8, 12, 8);
  const Model m = random_model(c, 21);
  std::mt19937_64 rng(5);
  const auto tokens = testing_support::random_tokens(c, 6, rng);
  const Params<double> base = cast_params<double>(m.params);
  auto loss = [&](const Params<double>& p) {
    const Engine e(c, p);
    double s = 0.0;
    for (double v : logprobs(e, tokens)) s -= v;
    return s;
  };
  const Engine engine(c, base);
  const LayerTrace trace = engine.forward(tokens);
  MatrixD dlogits = log_softmax_rows(trace.logits).array().exp();
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) dlogits(static_cast<Eigen::Index>(t), tokens.ids[t + 1]) -= 1.0;
  dlogits.row(dlogits.rows() - 1).setZero();
  Params<double> grads = zeros_like<double>(c);
  engine.backward(trace, dlogits, grads);

  std::mt19937_64 pick(9);
  auto gt = named_tensors(grads);
  for (std::size_t ti = 0; ti < gt.size(); ++ti) {
    for (int probe = 0; probe < 3; ++probe) {
      const auto n = static_cast<std::size_t>(gt[ti].second->size());
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, n - 1)(pick);
      Params<double> plus = base, minus = base;
      named_tensors(plus)[ti].second->data()[idx] += 1e-6;
      named_tensors(minus)[ti].second->data()[idx] -= 1e-6;
      const double numeric = (loss(plus) - loss(minus)) / 2e-6;
      const double analytic = gt[ti].second->data()[idx];
      EXPECT_NEAR(analytic, numeric, 1e-6 + 1e-5 * std::abs(numeric)) << gt[ti].first << "[" << idx << "]";
    }
  }
}

TEST(Sampling, GreedyIsArgmax) {
  RowVectorD z(4);
  z << 0.1, 2.0, -1.0, 1.9;
  EXPECT_EQ(sample_categorical(z, 0.0, 0.7), 1);
}

TEST(Sampling, FrequenciesWithinThreeSigma) {
  RowVectorD z(3);
  z << 0.0, std::log(2.0), std::log(5.0);  // probabilities 1/8, 2/8, 5/8
  const double p[3] = {0.125, 0.25, 0.625};
  std::mt19937_64 rng(4);
  const int n = 40000;
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) {
    ++counts[sample_categorical(z, 1.0, std::uniform_real_distribution<double>(0.0, 1.0)(rng))];
  }
  for (int k = 0; k < 3; ++k) {
    const double sigma = std::sqrt(n * p[k] * (1 - p[k]));
    EXPECT_LT(std::abs(counts[k] - n * p[k]), 3 * sigma) << k;
  }
}

TEST(Sampling, SeededDecodeIsDeterministic) {
  const auto c = small_config();
  const Model m = random_model(c, 8);
  DecodeConfig d;
  d.temperature = 1.0;
  d.max_new_tokens = 6;
  d.seed = 42;
  d.stop_at_eos = false;
  const TokenSequence prompt{{1, 5}, std::nullopt};
  const auto a = sample(m, prompt, d);
  EXPECT_EQ(a, sample(m, prompt, d));
  EXPECT_EQ(a.size(), 8u);
  EXPECT_EQ(std::vector<int>(a.ids.begin(), a.ids.begin() + 2), prompt.ids);
}
