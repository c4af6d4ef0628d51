#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/engine.hpp"
#include "neuronscope/model.hpp"

namespace neuronscope {

class Vocabulary;

struct ScoredSequence {
  TokenSequence instruction;
  TokenSequence response;
  std::vector<double> per_token_logprob;  // one entry per response token
  double cas = 0.0;
  std::optional<double> das;
};

// Conditioned answer score: mean negative log-probability of the response
// tokens given the instruction and the preceding response tokens.
double cas(const Model& model, const TokenSequence& instruction, const TokenSequence& response);
double cas(const Engine& engine, const TokenSequence& instruction, const TokenSequence& response);

// Direct answer score: the same average with only a bos token as context.
double das(const Model& model, const TokenSequence& response);
double das(const Engine& engine, const TokenSequence& response);

ScoredSequence score_sequence(const Engine& engine, const TokenSequence& instruction,
                              const TokenSequence& response, bool with_das);

enum class Metric { cas, das };

const char* to_string(Metric m);
Metric parse_metric(const std::string& name);

struct CorpusSample {
  std::string dataset;
  std::string language;
  std::string variant;
  TokenSequence instruction;
  TokenSequence response;
};

struct DifficultyRow {
  std::string dataset;
  std::string language;
  std::string variant;
  Metric metric = Metric::cas;
  double mean = 0.0;
  std::size_t count = 0;
};

struct DifficultyReport {
  std::vector<DifficultyRow> rows;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

// Groups by (dataset, language, variant) in lexicographic order, one row per
// requested metric. A failing sample aborts with DataError naming its index.
DifficultyReport difficulty_report(const Engine& engine, const std::vector<CorpusSample>& corpus,
                                   const std::vector<Metric>& metrics = {Metric::cas},
                                   int threads = 1);
DifficultyReport difficulty_report(const Model& model, const std::vector<CorpusSample>& corpus,
                                   const std::vector<Metric>& metrics = {Metric::cas},
                                   int threads = 1);

// JSONL {dataset, language, variant, instruction, response}. instruction and
// response are strings (tokenized with vocab) or arrays of token ids.
std::vector<CorpusSample> load_scoring_corpus(const std::filesystem::path& path,
                                              const Vocabulary* vocab);

}  // namespace neuronscope
