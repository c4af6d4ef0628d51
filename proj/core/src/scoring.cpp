#include "neuronscope/scoring.hpp"

#include <cstdio>
#include <map>
#include <tuple>

#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/parallel.hpp"
#include "neuronscope/vocabulary.hpp"

namespace neuronscope {

namespace {

std::vector<double> response_logprobs(const Engine& engine, const TokenSequence& context,
                                      const TokenSequence& response) {
  if (context.ids.empty()) throw ArgumentError("instruction context is empty");
  if (response.ids.empty()) throw ArgumentError("response is empty");
  TokenSequence joined{context.ids, std::nullopt};
  joined.ids.insert(joined.ids.end(), response.ids.begin(), response.ids.end());
  if (static_cast<int>(joined.size()) > engine.config().max_seq_len) {
    throw LengthError("instruction + response (" + std::to_string(joined.size()) +
                      " tokens) exceeds max_seq_len " +
                      std::to_string(engine.config().max_seq_len));
  }
  const auto all = logprobs(engine, joined);
  return {all.end() - static_cast<std::ptrdiff_t>(response.size()), all.end()};
}

double negative_mean(const std::vector<double>& v) {
  double sum = 0.0;
  for (double x : v) sum += x;
  return -sum / static_cast<double>(v.size());
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const TokenSequence& bos_context() {
  static const TokenSequence bos{{kBosId}, std::nullopt};
  return bos;
}

}  // namespace

double cas(const Engine& engine, const TokenSequence& instruction, const TokenSequence& response) {
  return negative_mean(response_logprobs(engine, instruction, response));
}

double cas(const Model& model, const TokenSequence& instruction, const TokenSequence& response) {
  return cas(Engine(model), instruction, response);
}

double das(const Engine& engine, const TokenSequence& response) {
  return cas(engine, bos_context(), response);
}

double das(const Model& model, const TokenSequence& response) { return das(Engine(model), response); }

ScoredSequence score_sequence(const Engine& engine, const TokenSequence& instruction,
                              const TokenSequence& response, bool with_das) {
  ScoredSequence s;
  s.instruction = instruction;
  s.response = response;
  s.per_token_logprob = response_logprobs(engine, instruction, response);
  s.cas = negative_mean(s.per_token_logprob);
  if (with_das) s.das = das(engine, response);
  return s;
}

const char* to_string(Metric m) { return m == Metric::cas ? "CAS" : "DAS"; }

Metric parse_metric(const std::string& name) {
  if (name == "cas" || name == "CAS") return Metric::cas;
  if (name == "das" || name == "DAS") return Metric::das;
  throw ArgumentError("unknown metric '" + name + "' (expected cas or das)");
}

DifficultyReport difficulty_report(const Engine& engine, const std::vector<CorpusSample>& corpus,
                                   const std::vector<Metric>& metrics, int threads) {
  if (corpus.empty()) throw ArgumentError("difficulty report needs a non-empty corpus");
  if (metrics.empty()) throw ArgumentError("no metrics requested");
  const std::size_t n_metrics = metrics.size();
  std::vector<double> scores(corpus.size() * n_metrics);
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    const auto& s = corpus[i];
    try {
      for (std::size_t m = 0; m < n_metrics; ++m) {
        scores[i * n_metrics + m] = metrics[m] == Metric::cas
                                        ? cas(engine, s.instruction, s.response)
                                        : das(engine, s.response);
      }
    } catch (const Error& e) {
      throw DataError("sample " + std::to_string(i) + " (" + s.dataset + "/" + s.language + "/" +
                          s.variant + "): " + e.what(),
                      i + 1);
    }
  });

  using Key = std::tuple<std::string, std::string, std::string, int>;
  std::map<Key, std::pair<double, std::size_t>> groups;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (std::size_t m = 0; m < n_metrics; ++m) {
      auto& g = groups[{corpus[i].dataset, corpus[i].language, corpus[i].variant,
                        static_cast<int>(metrics[m])}];
      g.first += scores[i * n_metrics + m];
      g.second += 1;
    }
  }
  DifficultyReport report;
  for (const auto& [key, acc] : groups) {
    const auto& [dataset, language, variant, metric] = key;
    report.rows.push_back({dataset, language, variant, static_cast<Metric>(metric),
                           acc.first / static_cast<double>(acc.second), acc.second});
  }
  return report;
}

DifficultyReport difficulty_report(const Model& model, const std::vector<CorpusSample>& corpus,
                                   const std::vector<Metric>& metrics, int threads) {
  return difficulty_report(Engine(model), corpus, metrics, threads);
}

std::string DifficultyReport::to_csv() const {
  std::string out = "dataset,language,variant,metric,mean,count\n";
  for (const auto& r : rows) {
    out += r.dataset + "," + r.language + "," + r.variant + "," + to_string(r.metric) + "," +
           format_double(r.mean) + "," + std::to_string(r.count) + "\n";
  }
  return out;
}

nlohmann::json DifficultyReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"dataset", r.dataset},
                         {"language", r.language},
                         {"variant", r.variant},
                         {"metric", to_string(r.metric)},
                         {"mean", r.mean},
                         {"count", r.count}});
  }
  return {{"rows", rows_json}};
}

std::vector<CorpusSample> load_scoring_corpus(const std::filesystem::path& path,
                                              const Vocabulary* vocab) {
  std::vector<CorpusSample> out;
  for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line) {
    CorpusSample s;
    for (const char* field : {"dataset", "language", "variant"}) {
      if (!obj.contains(field) || !obj[field].is_string()) {
        throw DataError(std::string("missing string field '") + field + "'", line, field);
      }
    }
    s.dataset = obj["dataset"];
    s.language = obj["language"];
    s.variant = obj["variant"];
    for (const char* field : {"instruction", "response"}) {
      if (!obj.contains(field)) {
        throw DataError(std::string("missing field '") + field + "'", line, field);
      }
    }
    s.instruction = tokens_from_json(obj["instruction"], vocab, line, "instruction");
    s.response = tokens_from_json(obj["response"], vocab, line, "response");
    out.push_back(std::move(s));
  });
  if (out.empty()) throw DataError("scoring corpus " + path.string() + " is empty");
  return out;
}

}  // namespace neuronscope
