#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/text.hpp"

namespace neuronscope {

enum class Stage { en_only, mixed, kor_only };

const char* to_string(Stage stage);
Stage parse_stage(std::string_view name);  // throws ArgumentError

struct StageLabel {
  Span span;  // code points into corrected_solution
  Stage stage = Stage::en_only;

  bool operator==(const StageLabel&) const = default;
};

struct SelfCorrectionSample {
  std::string problem;
  std::string incorrect_solution;
  std::size_t first_error_index = 0;  // code point offset into incorrect_solution
  std::string trigger;
  std::string corrected_solution;
  std::vector<StageLabel> stage_labels;
  std::string language = "en";
  std::optional<std::string> gold_answer;

  bool operator==(const SelfCorrectionSample&) const = default;
};

// Throws DataError naming the offending field (and line, when given).
void validate_sample(const SelfCorrectionSample& sample, std::size_t line = 0);

nlohmann::json to_json(const SelfCorrectionSample& sample);
SelfCorrectionSample sample_from_json(const nlohmann::json& j, std::size_t line = 0);

std::vector<SelfCorrectionSample> ingest_jsonl(const std::filesystem::path& path);
void export_jsonl(const std::vector<SelfCorrectionSample>& samples,
                  const std::filesystem::path& path);

// Sentences end after . ! ? or 。 followed by whitespace (or end of text),
// and at newlines. Spans are code points and cover the text without gaps.
std::vector<Span> sentence_spans(std::u32string_view text);

// Every sentence overlapping [0, index), i.e. the prefix ending at the
// boundary of the sentence that holds code point index - 1. Index 0 gives
// "", index = length gives the whole solution. Throws ArgumentError past the end.
std::string truncate_at_first_error(std::string_view solution, std::size_t index);

const std::vector<std::string>& default_triggers();

struct TriggeredText {
  std::string text;
  bool recognized = true;  // false when the trigger is not in the lexicon
};

TriggeredText append_trigger(std::string_view prefix, std::string_view trigger,
                             const std::vector<std::string>& lexicon = default_triggers());

// Embedded prompt templates: self_correction_v1, cas_das_v1, first_error_v1.
std::vector<std::string> template_ids();
std::string_view prompt_template(std::string_view id);  // throws ArgumentError

// Substitutes {name} placeholders; throws ArgumentError when one is left unfilled.
std::string render_template(std::string_view id, const std::map<std::string, std::string>& vars);

struct CompletionRequest {
  std::string prompt;
  int max_tokens = 1024;
  double temperature = 0.0;
  std::string purpose;  // "first_error" or "correction"
};

class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  // Implementations must be safe to call from several threads.
  virtual std::string complete(const CompletionRequest& request) = 0;
};

// Deterministic: the same seed and request always give the same text.
class StubGenerator : public GeneratorClient {
 public:
  using Responder = std::function<std::string(const CompletionRequest&, std::uint64_t seed)>;

  explicit StubGenerator(std::uint64_t seed = 0, Responder responder = {});
  std::string complete(const CompletionRequest& request) override;

 private:
  std::uint64_t seed_;
  Responder responder_;
};

struct HttpGeneratorConfig {
  std::string endpoint;  // http[s]://host[:port]/path
  std::string api_key;
  std::chrono::milliseconds timeout{60000};
  int max_attempts = 3;
  std::chrono::milliseconds backoff{200};  // doubled after each failure

  // Fields from JSON, then GENERATOR_ENDPOINT / GENERATOR_API_KEY override.
  static HttpGeneratorConfig from_json(const nlohmann::json& j);
  void apply_environment();
};

// POSTs {prompt, max_tokens, temperature} as JSON and reads {"text"} back.
// Throws TransportError once every attempt has failed.
class HttpGeneratorClient : public GeneratorClient {
 public:
  explicit HttpGeneratorClient(HttpGeneratorConfig config);
  std::string complete(const CompletionRequest& request) override;

 private:
  HttpGeneratorConfig config_;
  std::string scheme_host_;
  std::string path_;
};

struct BuildOptions {
  std::string template_id = "self_correction_v1";
  std::string trigger = "wait";
  std::string language = "en";  // "ko" adds the Korean-response instruction
  std::optional<std::string> gold_answer;
  int max_tokens = 1024;
  double temperature = 0.0;
};

enum class BuildStatus { ok, validation_failed };

struct BuildResult {
  SelfCorrectionSample sample;
  BuildStatus status = BuildStatus::ok;
  std::string message;
  bool trigger_recognized = true;
};

// Asks the client for the first erroneous sentence, truncates the incorrect
// solution after it, appends the trigger, and asks for the continuation.
// corrected_solution is prefix + trigger + continuation. A located error is
// recorded as the start of its sentence.
BuildResult build_self_correction_sample(const std::string& problem,
                                         const std::string& incorrect_solution,
                                         GeneratorClient& client, const BuildOptions& options);

struct BuildInput {
  std::string problem;
  std::string incorrect_solution;
  std::optional<std::string> gold_answer;
  std::optional<std::string> language;
};

// At most max_in_flight requests run at once; results keep input order.
std::vector<BuildResult> build_samples(const std::vector<BuildInput>& inputs,
                                       GeneratorClient& client, const BuildOptions& options,
                                       int max_in_flight = 4);

struct StageSegment {
  Stage stage = Stage::en_only;
  Span span;  // code points
  std::size_t words = 0;  // language-bearing words inside the span
  double purity = 1.0;  // share of those words in the stage's language(s)
};

struct StageReport {
  std::vector<StageSegment> segments;
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  bool has(Stage stage) const;
  nlohmann::json to_json() const;
};

// Labels consecutive windows of language-bearing words as en_only (>= 90%
// English), kor_only (>= 90% Korean) or mixed, then merges equal runs. A
// partial tail window joins the previous window, and a lone
// monolingual window between two mixed windows counts as mixed.
std::vector<StageSegment> infer_stages(std::string_view text, std::size_t window = 10);

// Uses the sample's stage_labels when present, otherwise infers them from
// corrected_solution, and checks en_only -> mixed -> kor_only.
StageReport validate_code_switch_stages(const SelfCorrectionSample& sample);

}  // namespace neuronscope
