// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers as arguments to run a
// subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bruno.hpp"
#include "helpers.hpp"
#include "neuronscope/datakit.hpp"
#include "neuronscope/engine.hpp"
#include "neuronscope/grpo.hpp"
#include "neuronscope/importance.hpp"
#include "neuronscope/intervention.hpp"
#include "neuronscope/lens.hpp"
#include "neuronscope/scoring.hpp"
#include "neuronscope/selection.hpp"
#include "neuronscope/vocabulary.hpp"
#include "reference.hpp"

using namespace neuronscope;
using testing_support::random_model;
using testing_support::random_tokens;
using testing_support::small_config;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Relative error with an absolute floor for values that are zero up to rounding.
double rel_diff(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// 1. Parallel importance against per-neuron deactivation.
Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  double worst_ffn = 0.0, worst_attn = 0.0, worst_ref = 0.0;
  std::size_t checked = 0;
  for (int m = 0; m < 20; ++m) {
    const int heads = pick(1, 4);
    const int d_mid = heads * pick(1, 32 / heads);
    const auto cfg = small_config(pick(1, 4), pick(4, 32), pick(4, 64), heads, d_mid, 20, 16);
    const Model model = random_model(cfg, 1000 + static_cast<std::uint64_t>(m));
    const Engine engine(model);
    const TokenSequence input = random_tokens(cfg, static_cast<std::size_t>(pick(2, 16)), rng);
    const LayerTrace trace = engine.forward(input);
    const auto weights = reference::from_model(model);
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
      const FfnImportance ffn = importance_ffn_parallel(engine, trace, layer);
      const AttnImportance attn = importance_attn_parallel(engine, trace, layer, AttnMode::exact);
      auto check = [&](Submodule s, const VectorD& par, double& worst) {
        for (int i = 0; i < par.size(); ++i) {
          const NeuronId n{layer, s, i};
          const double seq = importance_sequential(engine, trace, n);
          worst = std::max(worst, rel_diff(par(i), seq));
          ++checked;
          // The scalar oracle is slow; spot-check it on the first models.
          if (m < 3) worst_ref = std::max(worst_ref, rel_diff(par(i), reference::importance(weights, input.ids, n)));
        }
      };
      check(Submodule::ffn_up, ffn.up, worst_ffn);
      check(Submodule::ffn_down, ffn.down, worst_ffn);
      check(Submodule::attn_q, attn.q, worst_attn);
      check(Submodule::attn_k, attn.k, worst_attn);
      check(Submodule::attn_v, attn.v, worst_attn);
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = worst_ffn <= 1e-5 && worst_attn <= 1e-5 && worst_ref <= 1e-5 && secs < 60.0;
  return {pass, fmt("%zu neurons, max rel err ffn %.2e attn %.2e scalar oracle %.2e, %.1fs", checked,
                    worst_ffn, worst_attn, worst_ref, secs)};
}

// 2. Vectorized full-layer FFN importance against one deactivation per neuron.
Outcome speedup() {
  const auto cfg = small_config(1, 64, 1024, 4, 64, 64, 32);
  const Model model = random_model(cfg, 7, 0.1);
  const Engine engine(model);
  std::mt19937_64 rng(3);
  const LayerTrace trace = engine.forward(random_tokens(cfg, 32, rng));

  const int reps = 20;
  double sink = 0.0;
  auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) {
    const FfnImportance f = importance_ffn_parallel(engine, trace, 0);
    sink += f.up.sum() + f.down.sum();
  }
  const double parallel = seconds_since(t0) / reps;

  t0 = Clock::now();
  for (const Submodule s : {Submodule::ffn_up, Submodule::ffn_down}) {
    for (int i = 0; i < cfg.d_inter; ++i) sink += importance_sequential(engine, trace, NeuronId{0, s, i});
  }
  const double sequential = seconds_since(t0);
  const double ratio = sequential / parallel;
  return {ratio >= 20.0 && std::isfinite(sink),
          fmt("d_inter 1024: parallel %.4fs, sequential %.3fs, speedup %.0fx", parallel, sequential, ratio)};
}

// 3. CAS against perplexity recomputed by the scalar oracle, and the uniform model.
Outcome cas_identities() {
  std::mt19937_64 rng(17);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto cfg = small_config(pick(1, 3), 16, 32, 2, 16, 30, 16);
    const Model model = random_model(cfg, 300 + static_cast<std::uint64_t>(i));
    const TokenSequence inst = random_tokens(cfg, static_cast<std::size_t>(pick(1, 6)), rng);
    TokenSequence resp = random_tokens(cfg, static_cast<std::size_t>(pick(2, 9)), rng);
    resp.ids.erase(resp.ids.begin());
    std::vector<int> all = inst.ids;
    all.insert(all.end(), resp.ids.begin(), resp.ids.end());
    const double nll = reference::nll(reference::from_model(model), all, inst.size() - 1);
    const double ppl = std::exp(nll / static_cast<double>(resp.size()));
    worst = std::max(worst, rel_diff(std::exp(cas(model, inst, resp)), ppl));
  }

  const auto cfg = small_config(2, 16, 32, 2, 16, 30, 16);
  Model uniform = random_model(cfg, 5);
  uniform.params.token_embedding.setZero();
  const TokenSequence inst{{kBosId, 5, 9}, {}};
  const TokenSequence resp{{7, 8, 12, 4}, {}};
  const double ln_v = std::log(static_cast<double>(cfg.vocab_size));
  const double c = cas(uniform, inst, resp);
  const double d = das(uniform, resp);
  const bool uniform_ok = rel_diff(c, ln_v) <= 1e-14 && rel_diff(d, ln_v) <= 1e-14;
  return {worst <= 1e-9 && uniform_ok,
          fmt("max rel err of exp(cas) vs perplexity %.2e; uniform cas-ln V %.1e das-ln V %.1e", worst,
              c - ln_v, d - ln_v)};
}

bool frozen_outside(const Model& before, const Model& after, const InterventionMask& mask,
                    std::size_t& changed_inside) {
  const auto a = named_tensors(before.params);
  const auto b = named_tensors(after.params);
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (Eigen::Index i = 0; i < a[t].second->size(); ++i) {
      const float x = a[t].second->data()[i];
      const float y = b[t].second->data()[i];
      const bool same = std::memcmp(&x, &y, sizeof x) == 0;
      if (mask.covers(t, static_cast<std::size_t>(i))) {
        changed_inside += same ? 0 : 1;
      } else if (!same) {
        return false;
      }
    }
  }
  return true;
}

// 4. Selective tuning: isolation, gradient check and overfitting one sequence.
Outcome tuning_contract() {
  const auto t0 = Clock::now();
  const auto cfg = small_config(2, 16, 32, 2, 16, 24, 16);
  const Model model = random_model(cfg, 11, 0.3);
  std::mt19937_64 rng(23);

  NeuronSet set;
  set.language = "ko";
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    for (const Submodule s : kAllSubmodules) {
      for (int i = layer; i < submodule_width(cfg, s); i += 7) set.neurons.push_back({layer, s, i});
    }
  }
  std::sort(set.neurons.begin(), set.neurons.end());
  std::vector<TokenSequence> data;
  for (int i = 0; i < 8; ++i) data.push_back(random_tokens(cfg, 12, rng));

  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  tc.seed = 4;
  const TrainResult tuned = tune_neurons(model, set, data, tc);
  std::size_t changed = 0;
  const bool isolated = frozen_outside(model, tuned.model, InterventionMask(cfg, set), changed);

  double grad_err = 0.0;
  for (std::uint64_t s = 0; s < 4; ++s) {
    grad_err = std::max(grad_err, grad_check(model, set, data[s], s, 64).max_rel_error);
  }

  NeuronSet every;
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    for (const Submodule s : kAllSubmodules) {
      for (int i = 0; i < submodule_width(cfg, s); ++i) every.neurons.push_back({layer, s, i});
    }
  }
  const std::vector<TokenSequence> one{random_tokens(cfg, 16, rng)};
  TrainConfig oc = tc;
  oc.batch_size = 1;
  const double before = sequence_nll(Engine(model), one[0]);
  const double after = sequence_nll(Engine(tune_neurons(model, every, one, oc).model), one[0]);
  const double drop = 1.0 - after / before;

  const double secs = seconds_since(t0);
  const bool pass = isolated && changed > 0 && grad_err <= 1e-3 && drop >= 0.8 && secs < 120.0;
  return {pass, fmt("frozen entries bit-identical: %s (%zu masked entries moved); grad check %.2e; "
                    "overfit loss %.3f -> %.3f (-%.0f%%); %.1fs",
                    isolated ? "yes" : "no", changed, grad_err, before, after, 100.0 * drop, secs)};
}

// Two synthetic languages over disjoint vocabulary halves plus shared math
// tokens. Each language is its own sparse first-order Markov chain over its
// half. Sequences carry no bos: a constant first position would give every
// input the same large contributions from attention-sink neurons, which
// swamp any ranking.
class BilingualCorpus {
 public:
  static constexpr int kLangTokens = 36;
  static constexpr int kFirstA = kReservedTokens;
  static constexpr int kFirstB = kFirstA + kLangTokens;
  static constexpr int kFirstMath = kFirstB + kLangTokens;  // digits 0-9, '+', '='
  static constexpr int kVocab = kFirstMath + 12;
  static constexpr int kLen = 48;

  explicit BilingualCorpus(std::uint64_t seed) : rng_(seed) {
    for (auto& next : next_) {
      next.resize(kLangTokens);
      for (auto& succ : next) {
        for (int k = 0; k < 3; ++k) succ.push_back(uniform(kLangTokens));
      }
    }
  }

  // Plain word chain in one language.
  TokenSequence general(int lang) {
    Writer w(*this, lang);
    while (w.room(1)) w.word();
    return w.s;
  }

  // Three words, then a sum "a + b = c", repeated.
  TokenSequence math(int lang) {
    Writer w(*this, lang);
    while (w.room(1)) {
      for (int i = 0; i < 3 && w.room(1); ++i) w.word();
      if (w.room(5)) sum(w.s);
    }
    return w.s;
  }

  // Reasoning-pattern input: one language word, then nothing but sums.
  TokenSequence reasoning(int lang) {
    Writer w(*this, lang);
    w.word();
    while (w.room(5)) sum(w.s);
    return w.s;
  }

 private:
  struct Writer {
    Writer(BilingualCorpus& c, int lang) : c(c), lang(lang), w(c.uniform(kLangTokens)) {}
    bool room(int n) const { return static_cast<int>(s.size()) + n <= kLen; }
    void word() {
      s.ids.push_back((lang == 0 ? kFirstA : kFirstB) + w);
      w = c.next_[lang][static_cast<std::size_t>(w)][static_cast<std::size_t>(c.uniform(3))];
    }
    BilingualCorpus& c;
    int lang;
    int w;
    TokenSequence s;
  };

  int uniform(int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng_); }
  void sum(TokenSequence& s) {
    const int a = uniform(10), b = uniform(10);
    s.ids.insert(s.ids.end(), {kFirstMath + a, kFirstMath + 10, kFirstMath + b, kFirstMath + 11,
                               kFirstMath + (a + b) % 10});
  }

  std::mt19937_64 rng_;
  std::vector<std::vector<int>> next_[2];
};

double mean_token_nll(const Engine& engine, const std::vector<TokenSequence>& data) {
  double total = 0.0, tokens = 0.0;
  for (const auto& s : data) {
    total += sequence_nll(engine, s);
    tokens += static_cast<double>(s.size() - 1);
  }
  return total / tokens;
}

struct ToyExperiment {
  Model model;
  double train_seconds = 0.0;
  int steps = 0;
  double holdout_nll = 0.0;
  NeuronSet set_a, set_b;
  std::vector<TokenSequence> eval_a, eval_b, general_a, reasoning_a;
  bool ready = false;
  std::string error;
};

ToyExperiment& toy() {
  static ToyExperiment x = [] {
    ToyExperiment e;
    try {
      BilingualCorpus corpus(2024);
      std::vector<TokenSequence> train, holdout;
      for (int lang = 0; lang < 2; ++lang) {
        for (int i = 0; i < 3000; ++i) train.push_back(corpus.general(lang));
        for (int i = 0; i < 1000; ++i) train.push_back(corpus.math(lang));
        for (int i = 0; i < 40; ++i) holdout.push_back(corpus.general(lang));
      }
      // A wide FFN leaves room for a top-1% selection: at most
      // top_fraction * d_inter neurons per family can pass the all-inputs test.
      const ModelConfig cfg =
          small_config(4, 16, 1024, 2, 16, BilingualCorpus::kVocab, BilingualCorpus::kLen);
      const Model init = init_random(cfg, 99);
      TrainConfig tc;
      tc.steps = 4000;
      tc.batch_size = 16;
      tc.learning_rate = 3e-3;
      tc.seed = 8;
      tc.early_stop_patience = 5;
      tc.eval_every = 100;
      const auto t0 = Clock::now();
      TrainResult r = train_masked(init, InterventionMask::all(cfg), train, tc, &holdout);
      e.train_seconds = seconds_since(t0);
      e.steps = r.steps_run;
      e.model = std::move(r.model);
      const Engine engine(e.model);
      e.holdout_nll = mean_token_nll(engine, holdout);

      std::vector<TokenSequence> sel_a, sel_b;
      for (int i = 0; i < 40; ++i) sel_a.push_back(corpus.general(0));
      for (int i = 0; i < 40; ++i) sel_b.push_back(corpus.general(1));
      for (int i = 0; i < 100; ++i) e.eval_a.push_back(corpus.general(0));
      for (int i = 0; i < 100; ++i) e.eval_b.push_back(corpus.general(1));
      for (int i = 0; i < 40; ++i) e.general_a.push_back(corpus.general(0));
      for (int i = 0; i < 40; ++i) e.reasoning_a.push_back(corpus.reasoning(0));

      std::map<std::string, ImportanceTable> tables;
      tables["a"] = compute_importance_table(engine, sel_a, "a");
      tables["b"] = compute_importance_table(engine, sel_b, "b");
      e.set_a = select_language_neurons(tables, "a", 0.01, false);
      e.set_b = select_language_neurons(tables, "b", 0.01, false);
      e.ready = true;
    } catch (const std::exception& ex) {
      e.error = ex.what();
    }
    return e;
  }();
  return x;
}

// 5. Deactivation on the trained bilingual toy model.
Outcome toy_deactivation() {
  ToyExperiment& e = toy();
  if (!e.ready) return {false, "toy experiment failed: " + e.error};
  const ModelConfig& cfg = e.model.config;

  std::size_t shared = 0;
  for (const auto& n : e.set_a.neurons) shared += e.set_b.contains(n) ? 1 : 0;
  const std::size_t smaller = std::min(e.set_a.size(), e.set_b.size());
  const double overlap = smaller == 0 ? 1.0 : static_cast<double>(shared) / static_cast<double>(smaller);

  const int early = early_layer_limit(cfg);
  const NeuronSet early_a = e.set_a.restricted_to_layers(0, early);
  const Engine base(e.model);
  const double base_a = mean_token_nll(base, e.eval_a);
  const double base_b = mean_token_nll(base, e.eval_b);
  const Engine off(deactivate(e.model, early_a));
  const double delta_a = mean_token_nll(off, e.eval_a) - base_a;
  const double delta_b = mean_token_nll(off, e.eval_b) - base_b;

  std::vector<NeuronId> pool;
  for (int layer = 0; layer < early; ++layer) {
    for (const Submodule s : kAllSubmodules) {
      for (int i = 0; i < submodule_width(cfg, s); ++i) pool.push_back({layer, s, i});
    }
  }
  std::mt19937_64 rng(55);
  const int draws = 20;
  double delta_rand = 0.0;
  for (int d = 0; d < draws; ++d) {
    std::vector<NeuronId> pick;
    std::sample(pool.begin(), pool.end(), std::back_inserter(pick), early_a.size(), rng);
    delta_rand += mean_token_nll(Engine(deactivate(e.model, pick)), e.eval_a) - base_a;
  }
  delta_rand /= draws;

  Eigen::Index params = 0;
  for (const auto& [name, t] : named_tensors(e.model.params)) params += t->size();

  const bool pass = e.train_seconds < 600.0 && params <= 1000000 && !early_a.empty() && overlap < 0.2 &&
                    delta_a >= 2.0 * delta_rand && delta_b < delta_a;
  return {pass, fmt("%ld parameters trained %d steps in %.0fs (held-out nll %.3f); |A| %zu |B| %zu "
                    "overlap %.1f%%; "
                    "%zu early-layer A set entries: dNLL_A %.4f vs random %.4f (%.1fx), dNLL_B %.4f",
                    static_cast<long>(params), e.steps, e.train_seconds, e.holdout_nll, e.set_a.size(), e.set_b.size(),
                    100.0 * overlap, early_a.size(), delta_a, delta_rand,
                    delta_rand > 0.0 ? delta_a / delta_rand : INFINITY, delta_b)};
}

// 6. Early-layer activation of language-A neurons, general vs reasoning inputs.
Outcome toy_activation() {
  ToyExperiment& e = toy();
  if (!e.ready) return {false, "toy experiment failed: " + e.error};
  const Engine engine(e.model);
  const int early = early_layer_limit(e.model.config);
  const auto general = activation_ratio(engine, e.set_a, e.general_a, 0, early);
  const auto reasoning = activation_ratio(engine, e.set_a, e.reasoning_a, 0, early);
  if (!general.ratio || !reasoning.ratio) return {false, "no language-A neurons in the early layers"};
  const double g = *general.ratio, r = *reasoning.ratio;
  return {g >= 1.2 * r && g > 0.0,
          fmt("early-layer activation ratio general %.3f, reasoning %.3f (%zu neurons)", g, r,
              general.considered)};
}

// 7. GRPO on a four-answer bandit.
Outcome grpo_bandit() {
  const auto t0 = Clock::now();
  std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>", "<unk>", "q0", "q1", "q2", "q3",
                                  "0", "1", "2", "3"};
  const Vocabulary vocab(tokens);
  std::vector<Task> tasks;
  for (int q = 0; q < 4; ++q) tasks.push_back({TokenSequence{{kBosId, 4 + q}, {}}, std::to_string((q + 1) % 4)});
  const ModelConfig cfg = small_config(1, 16, 32, 2, 16, vocab.size(), 4);

  std::vector<double> initial, final;
  double worst_mean = 0.0;
  bool rewards_exact = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GrpoConfig gc;
    gc.group_size = 8;
    gc.batch_size = 4;
    gc.mini_batch = 4;
    gc.max_response_tokens = 1;
    gc.learning_rate = 1e-2;
    gc.kl_coef = 0.001;
    gc.format_weight = 0.0;
    gc.seed = seed;
    const Model init = init_random(cfg, 500 + seed);
    GrpoTrainer trainer(init, init, gc, text_reward(vocab));
    std::vector<double> curve;
    for (int step = 0; step < 300; ++step) {
      curve.push_back(trainer.step(tasks).mean_reward);
      for (const auto& g : trainer.last_groups()) {
        double sum = 0.0;
        for (double a : g.advantage) sum += a;
        worst_mean = std::max(worst_mean, std::abs(sum / static_cast<double>(g.advantage.size())));
        for (double o : g.outcome) rewards_exact &= (o == 2.0 || o == -2.0);
        for (double f : g.format) rewards_exact &= (f == 1.0 || f == -1.0);
      }
    }
    // Smooth the noisy per-step means over the first and last ten steps.
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
      head += curve[static_cast<std::size_t>(i)] / 10.0;
      tail += curve[curve.size() - 1 - static_cast<std::size_t>(i)] / 10.0;
    }
    initial.push_back(head);
    final.push_back(tail);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  };
  const double secs = seconds_since(t0);
  const double m0 = median(initial), m1 = median(final);
  return {m1 >= 1.5 && worst_mean <= 1e-6 && rewards_exact && secs < 300.0,
          fmt("10-seed median mean reward %.2f -> %.2f; max |group advantage mean| %.1e; rewards in "
              "{+-2, +-1}: %s; %.1fs",
              m0, m1, worst_mean, rewards_exact ? "yes" : "no", secs)};
}

Vocabulary mixed_vocabulary(int size) {
  const std::vector<std::string> pool{"the", "cat", "sat", "on", "mat", "고", "양", "이", "매",
                                      "일", "1", "2", "+", "=", "dog", "한", "국", "run", "?",
                                      "집"};
  std::vector<std::string> t{"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; static_cast<int>(t.size()) < size; ++i) t.push_back(pool[static_cast<std::size_t>(i)]);
  return Vocabulary(t);
}

// 8. Logit lens at the last layer reproduces the forward distribution.
Outcome lens_exactness() {
  std::mt19937_64 rng(77);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const Vocabulary vocab = mixed_vocabulary(24);
  double worst = 0.0, worst_simplex = 0.0;
  bool nonneg = true;
  for (int m = 0; m < 50; ++m) {
    const int heads = pick(1, 4);
    const auto cfg = small_config(pick(1, 4), pick(4, 32), pick(4, 64), heads, heads * pick(1, 8), 24, 16);
    const Model model = random_model(cfg, 900 + static_cast<std::uint64_t>(m));
    const Engine engine(model);
    const TokenSequence input = random_tokens(cfg, static_cast<std::size_t>(pick(1, 16)), rng);
    const MatrixD lens = lens_distribution(engine, engine.forward(input), cfg.n_layers);
    const auto z = reference::logits(reference::from_model(model), input.ids);
    for (std::size_t t = 0; t < z.size(); ++t) {
      const auto p = reference::softmax(z[t]);
      for (std::size_t v = 0; v < p.size(); ++v) {
        worst = std::max(worst, std::abs(lens(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)) - p[v]));
      }
    }
    std::vector<TokenSequence> corpus{input, random_tokens(cfg, 8, rng)};
    const LanguageRatios ratios = language_ratio(engine, vocab, corpus, pick(1, 3));
    if (ratios.per_layer.size() != static_cast<std::size_t>(cfg.n_layers + 1)) nonneg = false;
    for (const auto& r : ratios.per_layer) {
      nonneg &= r[0] >= 0.0 && r[1] >= 0.0 && r[2] >= 0.0;
      worst_simplex = std::max(worst_simplex, std::abs(r[0] + r[1] + r[2] - 1.0));
    }
  }
  return {worst <= 1e-6 && nonneg && worst_simplex <= 1e-12,
          fmt("max |lens - forward| %.2e over 50 models; ratio simplex error %.1e, non-negative: %s", worst,
              worst_simplex, nonneg ? "yes" : "no")};
}

// 9. Dataset round trip and the staged code-switching example.
Outcome datakit_round_trip() {
  StubGenerator stub(12);
  std::vector<BuildInput> inputs;
  for (int i = 0; i < 1000; ++i) {
    const std::string n = std::to_string(i);
    inputs.push_back({"Problem " + n + ": how many pens are in " + n + " boxes?",
                      "Each box has 12 pens. So there are " + n + " x 12 pens. The total is " +
                          std::to_string(i * 12 + 1) + ".",
                      std::to_string(i * 12), i % 2 == 0 ? std::optional<std::string>("ko") : std::nullopt});
  }
  std::vector<SelfCorrectionSample> samples;
  for (auto& r : build_samples(inputs, stub, {}, 4)) samples.push_back(std::move(r.sample));

  testing_support::TempDir dir;
  export_jsonl(samples, dir / "samples.jsonl");
  const auto back = ingest_jsonl(dir / "samples.jsonl");
  const bool lossless = back == samples;

  const SelfCorrectionSample bruno = testing_support::bruno_sample();
  std::string schema = "ok";
  try {
    validate_sample(bruno);
  } catch (const std::exception& ex) {
    schema = ex.what();
  }
  const StageReport report = validate_code_switch_stages(bruno);
  std::string stages;
  for (const auto& s : report.segments) stages += std::string(stages.empty() ? "" : " > ") + to_string(s.stage);
  for (const auto& v : report.violations) stages += "; " + v;
  const bool pass = lossless && back.size() == 1000 && schema == "ok" && report.ok() && report.has(Stage::mixed);
  return {pass, fmt("1000 samples lossless: %s; worked example schema %s, stages %s", lossless ? "yes" : "no",
                    schema.c_str(), stages.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence", oracle_equivalence},
      {"parallel importance speedup", speedup},
      {"cas/das identities", cas_identities},
      {"selective tuning contract", tuning_contract},
      {"toy bilingual deactivation", toy_deactivation},
      {"toy early-layer activation gap", toy_activation},
      {"grpo bandit convergence", grpo_bandit},
      {"logit lens exactness", lens_exactness},
      {"datakit round trip", datakit_round_trip},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first
              << "): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
