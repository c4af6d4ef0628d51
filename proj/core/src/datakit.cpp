#include "neuronscope/datakit.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/grpo.hpp"
#include "neuronscope/parallel.hpp"

// After the Eigen-bearing headers: <resolv.h> defines a _res macro.
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

namespace neuronscope {

namespace {

struct TemplateAsset {
  const char* id;
  const char* text;
};

constexpr TemplateAsset kTemplates[] = {
#include "neuronscope/prompt_assets.inc"
};

constexpr const char* kKoreanInstruction =
    " Additionally, ensure that the response should be Korean language.";

bool is_sentence_end(char32_t c) { return c == U'.' || c == U'!' || c == U'?' || c == U'。'; }

std::size_t code_point_length(std::string_view s) { return utf8_decode(s).size(); }

std::string substr_cp(const std::u32string& text, std::size_t begin, std::size_t end) {
  return utf8_encode(std::u32string_view(text).substr(begin, end - begin));
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9e3779b97f4a7c15ULL);
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string field_string(const nlohmann::json& j, const char* name, std::size_t line) {
  if (!j.contains(name)) throw DataError(std::string("missing field '") + name + "'", line, name);
  if (!j[name].is_string()) {
    throw DataError(std::string("field '") + name + "' must be a string", line, name);
  }
  return j[name].get<std::string>();
}

// The text after "Solution: " up to the end of that line, if the prompt has one.
std::string prompt_solution(std::string_view prompt) {
  const auto pos = prompt.find("\nSolution: ");
  if (pos == std::string_view::npos) return {};
  const auto begin = pos + 11;
  const auto end = prompt.find('\n', begin);
  return std::string(prompt.substr(begin, end == std::string_view::npos ? end : end - begin));
}

std::string default_stub_response(const CompletionRequest& req, std::uint64_t seed) {
  if (req.purpose == "first_error") {
    const std::string solution = prompt_solution(req.prompt);
    const std::u32string text = utf8_decode(solution);
    const auto spans = sentence_spans(text);
    if (spans.empty()) return {};
    return trim(substr_cp(text, spans.back().begin, spans.back().end));
  }
  static const char* kContinuations[] = {
      "Let me recheck the last step. The computation above used the wrong quantity.",
      "I should verify this again. Going back, the earlier step does not follow.",
      "Something is off here. Redoing the calculation carefully gives a different result.",
  };
  return kContinuations[fnv1a(req.prompt, seed) % std::size(kContinuations)];
}

std::string strip_quotes(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    s = trim(std::string_view(s).substr(1, s.size() - 2));
  }
  return s;
}

// Start offset (code points) of the sentence the generator pointed at.
std::optional<std::size_t> locate_error(const std::string& solution, const std::string& reply) {
  const std::string quoted = strip_quotes(reply);
  if (quoted.empty()) return std::nullopt;
  const std::u32string text = utf8_decode(solution);
  const std::u32string needle = utf8_decode(quoted);
  const auto pos = text.find(needle);
  if (pos == std::u32string::npos) return std::nullopt;
  for (const auto& s : sentence_spans(text)) {
    if (pos < s.end) return s.begin;
  }
  return std::nullopt;
}

}  // namespace

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::en_only:
      return "en_only";
    case Stage::mixed:
      return "mixed";
    case Stage::kor_only:
      return "kor_only";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  if (name == "en_only") return Stage::en_only;
  if (name == "mixed") return Stage::mixed;
  if (name == "kor_only") return Stage::kor_only;
  throw ArgumentError("unknown stage '" + std::string(name) + "'");
}

void validate_sample(const SelfCorrectionSample& s, std::size_t line) {
  const std::size_t wrong_len = code_point_length(s.incorrect_solution);
  if (s.first_error_index > wrong_len) {
    throw DataError("first_error_index " + std::to_string(s.first_error_index) +
                        " exceeds incorrect_solution length " + std::to_string(wrong_len),
                    line, "first_error_index");
  }
  if (trim(s.corrected_solution).empty()) {
    throw DataError("corrected_solution is empty", line, "corrected_solution");
  }
  const std::size_t fixed_len = code_point_length(s.corrected_solution);
  std::size_t prev_end = 0;
  for (const auto& l : s.stage_labels) {
    if (l.span.begin >= l.span.end || l.span.end > fixed_len) {
      throw DataError("stage span [" + std::to_string(l.span.begin) + ", " +
                          std::to_string(l.span.end) + ") is empty or outside corrected_solution",
                      line, "stage_labels");
    }
    if (l.span.begin < prev_end) {
      throw DataError("stage spans overlap or are out of order", line, "stage_labels");
    }
    prev_end = l.span.end;
  }
}

nlohmann::json to_json(const SelfCorrectionSample& s) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& l : s.stage_labels) {
    labels.push_back({{"begin", l.span.begin}, {"end", l.span.end}, {"stage", to_string(l.stage)}});
  }
  nlohmann::json j = {{"problem", s.problem},
                      {"incorrect_solution", s.incorrect_solution},
                      {"first_error_index", s.first_error_index},
                      {"trigger", s.trigger},
                      {"corrected_solution", s.corrected_solution},
                      {"stage_labels", std::move(labels)},
                      {"language", s.language}};
  if (s.gold_answer) j["gold_answer"] = *s.gold_answer;
  return j;
}

SelfCorrectionSample sample_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw DataError("expected a JSON object", line);
  SelfCorrectionSample s;
  s.problem = field_string(j, "problem", line);
  s.incorrect_solution = field_string(j, "incorrect_solution", line);
  if (!j.contains("first_error_index")) {
    throw DataError("missing field 'first_error_index'", line, "first_error_index");
  }
  if (!j["first_error_index"].is_number_unsigned()) {
    throw DataError("field 'first_error_index' must be a non-negative integer", line,
                    "first_error_index");
  }
  s.first_error_index = j["first_error_index"].get<std::size_t>();
  s.trigger = field_string(j, "trigger", line);
  s.corrected_solution = field_string(j, "corrected_solution", line);
  s.language = field_string(j, "language", line);
  if (!j.contains("stage_labels")) {
    throw DataError("missing field 'stage_labels'", line, "stage_labels");
  }
  if (!j["stage_labels"].is_array()) {
    throw DataError("field 'stage_labels' must be an array", line, "stage_labels");
  }
  for (const auto& l : j["stage_labels"]) {
    if (!l.is_object() || !l.contains("begin") || !l.contains("end") || !l.contains("stage") ||
        !l["begin"].is_number_unsigned() || !l["end"].is_number_unsigned() ||
        !l["stage"].is_string()) {
      throw DataError("stage label needs unsigned 'begin', 'end' and a 'stage' name", line,
                      "stage_labels");
    }
    StageLabel label;
    label.span = {l["begin"].get<std::size_t>(), l["end"].get<std::size_t>()};
    try {
      label.stage = parse_stage(l["stage"].get<std::string>());
    } catch (const ArgumentError& e) {
      throw DataError(e.what(), line, "stage_labels");
    }
    s.stage_labels.push_back(label);
  }
  if (j.contains("gold_answer") && !j["gold_answer"].is_null()) {
    s.gold_answer = field_string(j, "gold_answer", line);
  }
  validate_sample(s, line);
  return s;
}

std::vector<SelfCorrectionSample> ingest_jsonl(const std::filesystem::path& path) {
  std::vector<SelfCorrectionSample> out;
  for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line) {
    out.push_back(sample_from_json(obj, line));
  });
  return out;
}

void export_jsonl(const std::vector<SelfCorrectionSample>& samples,
                  const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    validate_sample(samples[i], i + 1);
    out << to_json(samples[i]).dump() << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<Span> sentence_spans(std::u32string_view text) {
  std::vector<Span> out;
  std::size_t start = 0;
  const std::size_t n = text.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t end = i + 1;
    bool boundary = text[i] == U'\n';
    if (!boundary && is_sentence_end(text[i])) {
      while (end < n && is_sentence_end(text[end])) ++end;
      boundary = end == n || is_space(text[end]);
    }
    if (!boundary) continue;
    // Trailing whitespace belongs to the sentence it follows.
    while (end < n && is_space(text[end])) ++end;
    out.push_back({start, end});
    start = end;
    i = end - 1;
  }
  if (start < n) out.push_back({start, n});
  return out;
}

std::string truncate_at_first_error(std::string_view solution, std::size_t index) {
  const std::u32string text = utf8_decode(solution);
  if (index > text.size()) {
    throw ArgumentError("first error index " + std::to_string(index) + " exceeds solution length " +
                        std::to_string(text.size()));
  }
  if (index == 0) return {};
  std::size_t end = text.size();
  for (const auto& s : sentence_spans(text)) {
    if (index - 1 < s.end) {
      end = s.end;
      break;
    }
  }
  std::size_t e = end;
  while (e > 0 && is_space(text[e - 1])) --e;
  return substr_cp(text, 0, e);
}

const std::vector<std::string>& default_triggers() {
  static const std::vector<std::string> triggers = {"however", "wait", "잠깐", "하지만"};
  return triggers;
}

TriggeredText append_trigger(std::string_view prefix, std::string_view trigger,
                             const std::vector<std::string>& lexicon) {
  TriggeredText out;
  const std::string lowered = to_lower_ascii(trim(trigger));
  out.recognized = std::any_of(lexicon.begin(), lexicon.end(), [&](const std::string& t) {
    return to_lower_ascii(t) == lowered;
  });
  out.text = prefix.empty() ? std::string(trigger) : std::string(prefix) + " " + std::string(trigger);
  return out;
}

std::vector<std::string> template_ids() {
  std::vector<std::string> ids;
  for (const auto& t : kTemplates) ids.emplace_back(t.id);
  return ids;
}

std::string_view prompt_template(std::string_view id) {
  for (const auto& t : kTemplates) {
    if (id == t.id) return t.text;
  }
  throw ArgumentError("unknown template '" + std::string(id) + "'");
}

std::string render_template(std::string_view id, const std::map<std::string, std::string>& vars) {
  const std::string_view tpl = prompt_template(id);
  std::string out;
  std::size_t i = 0;
  while (i < tpl.size()) {
    const auto open = tpl.find('{', i);
    if (open == std::string_view::npos) {
      out.append(tpl.substr(i));
      break;
    }
    const auto close = tpl.find('}', open);
    out.append(tpl.substr(i, open - i));
    if (close == std::string_view::npos) {
      out.append(tpl.substr(open));
      break;
    }
    const std::string name(tpl.substr(open + 1, close - open - 1));
    const auto it = vars.find(name);
    if (it == vars.end()) {
      throw ArgumentError("template '" + std::string(id) + "' needs a value for {" + name + "}");
    }
    out += it->second;
    i = close + 1;
  }
  return out;
}

StubGenerator::StubGenerator(std::uint64_t seed, Responder responder)
    : seed_(seed), responder_(std::move(responder)) {}

std::string StubGenerator::complete(const CompletionRequest& request) {
  return responder_ ? responder_(request, seed_) : default_stub_response(request, seed_);
}

HttpGeneratorConfig HttpGeneratorConfig::from_json(const nlohmann::json& j) {
  HttpGeneratorConfig c;
  try {
    c.endpoint = j.value("endpoint", c.endpoint);
    c.api_key = j.value("api_key", c.api_key);
    c.timeout = std::chrono::milliseconds(
        static_cast<long>(j.value("timeout_seconds", 60.0) * 1000.0));
    c.max_attempts = j.value("max_attempts", c.max_attempts);
    c.backoff = std::chrono::milliseconds(j.value("backoff_ms", 200));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  c.apply_environment();
  return c;
}

void HttpGeneratorConfig::apply_environment() {
  if (const char* e = std::getenv("GENERATOR_ENDPOINT"); e != nullptr && *e != '\0') endpoint = e;
  if (const char* k = std::getenv("GENERATOR_API_KEY"); k != nullptr && *k != '\0') api_key = k;
}

HttpGeneratorClient::HttpGeneratorClient(HttpGeneratorConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("generator endpoint must look like http://host:port/path, got '" +
                      config_.endpoint + "'");
  }
  const std::string scheme = config_.endpoint.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw ConfigError("unsupported generator scheme '" + scheme + "'");
  }
  const auto path_begin = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_ = config_.endpoint.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : config_.endpoint.substr(path_begin);
  if (config_.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
}

std::string HttpGeneratorClient::complete(const CompletionRequest& request) {
  const std::string body = nlohmann::json{{"prompt", request.prompt},
                                          {"max_tokens", request.max_tokens},
                                          {"temperature", request.temperature}}
                               .dump();
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  std::string last_error;
  auto backoff = config_.backoff;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    httplib::Client client(scheme_host_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    const auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
    } else if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
    } else {
      try {
        const auto j = nlohmann::json::parse(res->body);
        if (j.contains("text") && j["text"].is_string()) return j["text"].get<std::string>();
        last_error = "response has no string field 'text'";
      } catch (const nlohmann::json::parse_error& e) {
        last_error = std::string("response is not JSON: ") + e.what();
      }
    }
    if (attempt < config_.max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw TransportError("generator at " + config_.endpoint + " failed after " +
                       std::to_string(config_.max_attempts) + " attempt(s): " + last_error);
}

BuildResult build_self_correction_sample(const std::string& problem,
                                         const std::string& incorrect_solution,
                                         GeneratorClient& client, const BuildOptions& options) {
  BuildResult result;
  SelfCorrectionSample& s = result.sample;
  s.problem = problem;
  s.incorrect_solution = incorrect_solution;
  s.trigger = options.trigger;
  s.language = options.language;
  s.gold_answer = options.gold_answer;
  const std::string language_instruction = options.language == "ko" ? kKoreanInstruction : "";

  CompletionRequest locate;
  locate.prompt = render_template("first_error_v1", {{"problem", problem}, {"solution", incorrect_solution}});
  locate.max_tokens = options.max_tokens;
  locate.temperature = options.temperature;
  locate.purpose = "first_error";
  const std::string reply = client.complete(locate);
  const auto error_start = locate_error(incorrect_solution, reply);
  const std::size_t wrong_len = code_point_length(incorrect_solution);
  s.first_error_index = error_start.value_or(wrong_len);

  // The erroneous sentence itself stays in the prefix.
  const std::string prefix =
      truncate_at_first_error(incorrect_solution, std::min(s.first_error_index + 1, wrong_len));
  const TriggeredText triggered = append_trigger(prefix, options.trigger);
  result.trigger_recognized = triggered.recognized;

  CompletionRequest correct;
  correct.prompt = render_template(options.template_id, {{"problem", problem},
                                                         {"correct_solution", triggered.text},
                                                         {"solution", triggered.text},
                                                         {"language_instruction", language_instruction}});
  correct.max_tokens = options.max_tokens;
  correct.temperature = options.temperature;
  correct.purpose = "correction";
  const std::string continuation = trim(client.complete(correct));
  s.corrected_solution = continuation.empty() ? triggered.text : triggered.text + " " + continuation;

  for (const auto& seg : infer_stages(s.corrected_solution)) {
    s.stage_labels.push_back({seg.span, seg.stage});
  }

  if (!error_start) {
    result.status = BuildStatus::validation_failed;
    result.message = "could not locate the generator's first-error sentence in the solution";
  } else if (continuation.empty()) {
    result.status = BuildStatus::validation_failed;
    result.message = "generator returned an empty continuation";
  } else if (options.gold_answer) {
    const std::string answer = extract_answer(continuation);
    if (answer.empty() || !answers_match(answer, *options.gold_answer)) {
      result.status = BuildStatus::validation_failed;
      result.message = "corrected solution answers '" + answer + "', expected '" +
                       *options.gold_answer + "'";
    }
  }
  return result;
}

std::vector<BuildResult> build_samples(const std::vector<BuildInput>& inputs,
                                       GeneratorClient& client, const BuildOptions& options,
                                       int max_in_flight) {
  std::vector<BuildResult> out(inputs.size());
  parallel_for(inputs.size(), std::max(1, max_in_flight), [&](std::size_t i) {
    BuildOptions opt = options;
    if (inputs[i].gold_answer) opt.gold_answer = inputs[i].gold_answer;
    if (inputs[i].language) opt.language = *inputs[i].language;
    out[i] = build_self_correction_sample(inputs[i].problem, inputs[i].incorrect_solution, client,
                                          opt);
  });
  return out;
}

bool StageReport::has(Stage stage) const {
  return std::any_of(segments.begin(), segments.end(),
                     [&](const StageSegment& s) { return s.stage == stage; });
}

nlohmann::json StageReport::to_json() const {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : segments) {
    segs.push_back({{"stage", neuronscope::to_string(s.stage)},
                    {"begin", s.span.begin},
                    {"end", s.span.end},
                    {"words", s.words},
                    {"purity", s.purity}});
  }
  return {{"segments", std::move(segs)}, {"violations", violations}, {"ok", ok()}};
}

namespace {

struct LangWord {
  Span span;
  Language lang;
};

std::vector<LangWord> language_words(const std::u32string& text) {
  std::vector<LangWord> out;
  for (const auto& w : split_words(text)) {
    const Language lang = classify_token_language(substr_cp(text, w.begin, w.end));
    if (lang != Language::other) out.push_back({w, lang});
  }
  return out;
}

double stage_purity(Stage stage, std::size_t en, std::size_t ko) {
  const std::size_t n = en + ko;
  if (n == 0) return 1.0;
  switch (stage) {
    case Stage::en_only:
      return static_cast<double>(en) / static_cast<double>(n);
    case Stage::kor_only:
      return static_cast<double>(ko) / static_cast<double>(n);
    case Stage::mixed:
      return 1.0;
  }
  return 1.0;
}

Stage label_window(std::size_t en, std::size_t ko) {
  const double n = static_cast<double>(en + ko);
  if (static_cast<double>(en) >= 0.9 * n) return Stage::en_only;
  if (static_cast<double>(ko) >= 0.9 * n) return Stage::kor_only;
  return Stage::mixed;
}

}  // namespace

std::vector<StageSegment> infer_stages(std::string_view text, std::size_t window) {
  if (window == 0) throw ArgumentError("stage window must be >= 1");
  const std::u32string decoded = utf8_decode(text);
  const auto words = language_words(decoded);
  // Windows of `window` words; a shorter tail joins the previous window so a
  // few stray words cannot form a stage of their own.
  std::vector<std::pair<std::size_t, std::size_t>> bounds;
  for (std::size_t start = 0; start < words.size(); start += window) {
    const std::size_t stop = std::min(words.size(), start + window);
    if (!bounds.empty() && stop - start < window) {
      bounds.back().second = stop;
    } else {
      bounds.emplace_back(start, stop);
    }
  }
  std::vector<Stage> labels;
  for (const auto& [start, stop] : bounds) {
    std::size_t en = 0, ko = 0;
    for (std::size_t i = start; i < stop; ++i) (words[i].lang == Language::english ? en : ko)++;
    labels.push_back(label_window(en, ko));
  }
  // A single monolingual window between two mixed ones is part of the mixed
  // stage: code-switched prose often runs ten words in one language.
  for (std::size_t i = 1; i + 1 < labels.size(); ++i) {
    if (labels[i] != Stage::mixed && labels[i - 1] == Stage::mixed && labels[i + 1] == Stage::mixed) {
      labels[i] = Stage::mixed;
    }
  }
  std::vector<StageSegment> out;
  for (std::size_t w = 0; w < bounds.size(); ++w) {
    const auto [start, stop] = bounds[w];
    const Span span{words[start].span.begin, words[stop - 1].span.end};
    if (!out.empty() && out.back().stage == labels[w]) {
      out.back().span.end = span.end;
      out.back().words += stop - start;
    } else {
      out.push_back({labels[w], span, stop - start, 1.0});
    }
  }
  for (auto& seg : out) {
    std::size_t en = 0, ko = 0;
    for (const auto& w : words) {
      if (w.span.begin >= seg.span.begin && w.span.end <= seg.span.end) {
        (w.lang == Language::english ? en : ko)++;
      }
    }
    seg.purity = stage_purity(seg.stage, en, ko);
  }
  return out;
}

StageReport validate_code_switch_stages(const SelfCorrectionSample& sample) {
  StageReport report;
  if (sample.stage_labels.empty()) {
    report.segments = infer_stages(sample.corrected_solution);
  } else {
    const std::u32string decoded = utf8_decode(sample.corrected_solution);
    const auto words = language_words(decoded);
    for (const auto& l : sample.stage_labels) {
      StageSegment seg{l.stage, l.span, 0, 1.0};
      std::size_t en = 0, ko = 0;
      for (const auto& w : words) {
        if (w.span.begin >= l.span.begin && w.span.end <= l.span.end) {
          (w.lang == Language::english ? en : ko)++;
        }
      }
      seg.words = en + ko;
      seg.purity = stage_purity(l.stage, en, ko);
      report.segments.push_back(seg);
    }
  }
  int highest = -1;
  Stage highest_stage = Stage::en_only;
  for (const auto& seg : report.segments) {
    const int rank = static_cast<int>(seg.stage);
    if (rank < highest) {
      report.violations.push_back(std::string("order violation: ") + to_string(seg.stage) +
                                  " after " + to_string(highest_stage));
    } else {
      highest = rank;
      highest_stage = seg.stage;
    }
  }
  for (Stage st : {Stage::en_only, Stage::mixed, Stage::kor_only}) {
    if (!report.has(st)) report.violations.push_back(std::string("missing stage: ") + to_string(st));
  }
  return report;
}

}  // namespace neuronscope
