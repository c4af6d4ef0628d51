#include "neuronscope/lens.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "neuronscope/errors.hpp"
#include "neuronscope/vocabulary.hpp"

namespace neuronscope {

void LanguageTally::add(Language lang) {
  switch (lang) {
    case Language::korean:
      ++korean;
      break;
    case Language::english:
      ++english;
      break;
    case Language::other:
      ++other;
      break;
  }
}

namespace {

void check_layer(const ModelConfig& config, int layer) {
  if (layer < 0 || layer > config.n_layers) {
    throw ArgumentError("lens layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(config.n_layers) + "]");
  }
}

std::vector<int> top_indices(const RowVectorD& probs, int k) {
  std::vector<int> idx(static_cast<std::size_t>(probs.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                    [&](int a, int b) { return probs(a) > probs(b) || (probs(a) == probs(b) && a < b); });
  idx.resize(kk);
  return idx;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

MatrixD lens_distribution(const Engine& engine, const LayerTrace& trace, int layer, bool raw) {
  check_layer(engine.config(), layer);
  return log_softmax_rows(engine.project(trace.hidden_states[static_cast<std::size_t>(layer)], !raw))
      .array()
      .exp();
}

std::vector<LensReading> logit_lens(const Engine& engine, const TokenSequence& tokens, int layer,
                                    const Vocabulary* vocab, int top_k, bool raw) {
  check_layer(engine.config(), layer);
  const LayerTrace trace = engine.forward(tokens);
  const MatrixD probs = lens_distribution(engine, trace, layer, raw);
  std::vector<LensReading> out;
  for (Eigen::Index t = 0; t < probs.rows(); ++t) {
    LensReading r;
    r.layer = layer;
    r.position = static_cast<int>(t);
    for (int id : top_indices(probs.row(t), top_k)) {
      TokenProb tp{id, vocab != nullptr && id < vocab->size() ? vocab->token(id) : std::string(),
                   probs(t, id)};
      if (vocab != nullptr) r.tally.add(classify_token_language(tp.token));
      r.top.push_back(std::move(tp));
    }
    out.push_back(std::move(r));
  }
  return out;
}

LanguageRatios language_ratio(const Engine& engine, const Vocabulary& vocab,
                              const std::vector<TokenSequence>& corpus, int k, bool raw) {
  if (corpus.empty()) throw ArgumentError("language ratio needs a non-empty corpus");
  if (k < 1) throw ArgumentError("k must be >= 1");
  const int n_layers = engine.config().n_layers;
  std::vector<Language> token_lang(static_cast<std::size_t>(engine.config().vocab_size),
                                   Language::other);
  for (int id = 0; id < std::min(vocab.size(), engine.config().vocab_size); ++id) {
    token_lang[static_cast<std::size_t>(id)] = classify_token_language(vocab.token(id));
  }
  std::vector<LanguageTally> tallies(static_cast<std::size_t>(n_layers + 1));
  for (const auto& seq : corpus) {
    const LayerTrace trace = engine.forward(seq);
    for (int layer = 0; layer <= n_layers; ++layer) {
      const MatrixD probs = lens_distribution(engine, trace, layer, raw);
      for (Eigen::Index t = 0; t < probs.rows(); ++t) {
        for (int id : top_indices(probs.row(t), k)) {
          tallies[static_cast<std::size_t>(layer)].add(token_lang[static_cast<std::size_t>(id)]);
        }
      }
    }
  }
  LanguageRatios out;
  out.k = k;
  for (const auto& t : tallies) {
    const auto total = static_cast<double>(t.total());
    out.per_layer.push_back({t.korean / total, t.english / total, t.other / total});
  }
  return out;
}

double cosine_similarity(const VectorD& a, const VectorD& b) {
  const double denom = a.norm() * b.norm();
  if (denom == 0.0) return 0.0;
  return std::clamp(a.dot(b) / denom, -1.0, 1.0);
}

std::vector<std::vector<VectorD>> pooled_hidden_states(const Engine& engine,
                                                       const std::vector<TokenSequence>& corpus,
                                                       Pooling pooling) {
  const auto n_layers = static_cast<std::size_t>(engine.config().n_layers);
  std::vector<std::vector<VectorD>> pooled(n_layers + 1);
  for (const auto& seq : corpus) {
    const LayerTrace trace = engine.forward(seq);
    for (std::size_t layer = 0; layer <= n_layers; ++layer) {
      const MatrixD& h = trace.hidden_states[layer];
      pooled[layer].push_back(pooling == Pooling::mean ? VectorD(h.colwise().mean().transpose())
                                                       : VectorD(h.row(h.rows() - 1).transpose()));
    }
  }
  return pooled;
}

SimilarityCurve similarity_from_pooled(const std::vector<std::vector<VectorD>>& pooled_a,
                                       const std::vector<std::vector<VectorD>>& pooled_b) {
  if (pooled_a.size() != pooled_b.size()) throw ArgumentError("layer count mismatch");
  SimilarityCurve curve;
  for (std::size_t layer = 0; layer < pooled_a.size(); ++layer) {
    const auto& a = pooled_a[layer];
    const auto& b = pooled_b[layer];
    if (a.size() != b.size()) {
      throw ArgumentError("parallel corpora differ in length (" + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()) + ")");
    }
    if (a.empty()) throw ArgumentError("parallel corpora are empty");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += cosine_similarity(a[i], b[i]);
    curve.per_layer.push_back(sum / static_cast<double>(a.size()));
    curve.pairs = a.size();
  }
  return curve;
}

SimilarityCurve hidden_similarity(const Engine& engine, const std::vector<TokenSequence>& corpus_a,
                                  const std::vector<TokenSequence>& corpus_b, Pooling pooling) {
  if (corpus_a.size() != corpus_b.size()) {
    throw ArgumentError("parallel corpora differ in length (" + std::to_string(corpus_a.size()) +
                        " vs " + std::to_string(corpus_b.size()) + ")");
  }
  if (corpus_a.empty()) throw ArgumentError("parallel corpora are empty");
  return similarity_from_pooled(pooled_hidden_states(engine, corpus_a, pooling),
                                pooled_hidden_states(engine, corpus_b, pooling));
}

std::string series_csv(const std::vector<Series>& series) {
  std::string out = "layer,series,value\n";
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      out += std::to_string(i) + "," + s.name + "," + fmt(s.values[i]) + "\n";
    }
  }
  return out;
}

nlohmann::json series_json(const std::vector<Series>& series) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : series) out.push_back({{"series", s.name}, {"values", s.values}});
  return out;
}

std::string line_chart_svg(const std::vector<Series>& series, const std::string& title,
                           const std::string& y_label) {
  constexpr double kWidth = 640, kHeight = 400, kLeft = 60, kRight = 140, kTop = 40, kBottom = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};
  std::size_t n = 0;
  double lo = 0.0, hi = 1.0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  auto x_of = [&](std::size_t i) {
    return kLeft + (n <= 1 ? 0.0 : plot_w * static_cast<double>(i) / static_cast<double>(n - 1));
  };
  auto y_of = [&](double v) { return kTop + plot_h * (1.0 - (v - lo) / (hi - lo)); };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kWidth) +
                    "\" height=\"" + fmt(kHeight) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt(kWidth / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" +
         title + "</text>\n";
  svg += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(kTop + plot_h) + "\" x2=\"" +
         fmt(kLeft + plot_w) + "\" y2=\"" + fmt(kTop + plot_h) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt(kLeft) + "\" y1=\"" + fmt(kTop) + "\" x2=\"" + fmt(kLeft) +
         "\" y2=\"" + fmt(kTop + plot_h) + "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + fmt(kLeft + plot_w / 2) + "\" y=\"" + fmt(kHeight - 12) +
         "\" text-anchor=\"middle\" font-size=\"12\">layer</text>\n";
  svg += "<text x=\"16\" y=\"" + fmt(kTop + plot_h / 2) +
         "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 " +
         fmt(kTop + plot_h / 2) + ")\">" + y_label + "</text>\n";
  for (double v : {lo, hi}) {
    svg += "<text x=\"" + fmt(kLeft - 6) + "\" y=\"" + fmt(y_of(v) + 4) +
           "\" text-anchor=\"end\" font-size=\"10\">" + fmt(std::round(v * 100) / 100) +
           "</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kColors[si % std::size(kColors)];
    std::string points;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      points += fmt(x_of(i)) + "," + fmt(y_of(s.values[i])) + " ";
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
    svg += "<text x=\"" + fmt(kLeft + plot_w + 10) + "\" y=\"" + fmt(kTop + 16 * (si + 1)) +
           "\" font-size=\"12\" fill=\"" + color + "\">" + s.name + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::vector<Series> to_series(const LanguageRatios& ratios) {
  std::vector<Series> out = {{"korean", {}}, {"english", {}}, {"other", {}}};
  for (const auto& r : ratios.per_layer) {
    for (std::size_t i = 0; i < 3; ++i) out[i].values.push_back(r[i]);
  }
  return out;
}

std::vector<Series> to_series(const SimilarityCurve& curve) {
  const std::string name = curve.label_a.empty() ? std::string("similarity")
                                                 : curve.label_a + "-" + curve.label_b;
  return {{name, curve.per_layer}};
}

}  // namespace neuronscope
