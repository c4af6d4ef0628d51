#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/engine.hpp"
#include "neuronscope/text.hpp"

namespace neuronscope {

class Vocabulary;

struct TokenProb {
  int id = 0;
  std::string token;
  double prob = 0.0;
};

struct LanguageTally {
  std::size_t korean = 0;
  std::size_t english = 0;
  std::size_t other = 0;

  void add(Language lang);
  std::size_t total() const { return korean + english + other; }
};

struct LensReading {
  int layer = 0;
  int position = 0;
  std::vector<TokenProb> top;  // descending probability
  LanguageTally tally;  // languages of the top tokens (needs a vocabulary)
};

// Vocabulary distribution read off hidden_states[layer]: final norm (skipped
// when raw) then the tied output head, softmaxed per position. [l x vocab]
MatrixD lens_distribution(const Engine& engine, const LayerTrace& trace, int layer,
                          bool raw = false);

// Throws ArgumentError unless 0 <= layer <= n_layers.
std::vector<LensReading> logit_lens(const Engine& engine, const TokenSequence& tokens, int layer,
                                    const Vocabulary* vocab = nullptr, int top_k = 5,
                                    bool raw = false);

struct LanguageRatios {
  // Per layer 0..n_layers: {korean, english, other}, summing to 1.
  std::vector<std::array<double, 3>> per_layer;
  int k = 1;
};

// Pools the top-k lens tokens of every position of every input per layer and
// normalizes their language tallies.
LanguageRatios language_ratio(const Engine& engine, const Vocabulary& vocab,
                              const std::vector<TokenSequence>& corpus, int k = 1,
                              bool raw = false);

enum class Pooling { mean, last };

struct SimilarityCurve {
  std::vector<double> per_layer;  // n_layers + 1 entries in [-1, 1]
  std::string label_a;
  std::string label_b;
  std::size_t pairs = 0;
};

// Per layer: cosine similarity of the pooled hidden states of aligned pairs,
// averaged over pairs. Throws ArgumentError on length mismatch or empty input.
SimilarityCurve hidden_similarity(const Engine& engine, const std::vector<TokenSequence>& corpus_a,
                                  const std::vector<TokenSequence>& corpus_b,
                                  Pooling pooling = Pooling::mean);

// pooled_x[layer][pair] is the pooled hidden vector of one side.
SimilarityCurve similarity_from_pooled(const std::vector<std::vector<VectorD>>& pooled_a,
                                       const std::vector<std::vector<VectorD>>& pooled_b);

std::vector<std::vector<VectorD>> pooled_hidden_states(const Engine& engine,
                                                       const std::vector<TokenSequence>& corpus,
                                                       Pooling pooling);

double cosine_similarity(const VectorD& a, const VectorD& b);

struct Series {
  std::string name;
  std::vector<double> values;  // index = layer
};

// "layer,series,value" rows.
std::string series_csv(const std::vector<Series>& series);
nlohmann::json series_json(const std::vector<Series>& series);
std::string line_chart_svg(const std::vector<Series>& series, const std::string& title,
                           const std::string& y_label);

std::vector<Series> to_series(const LanguageRatios& ratios);
std::vector<Series> to_series(const SimilarityCurve& curve);

}  // namespace neuronscope
