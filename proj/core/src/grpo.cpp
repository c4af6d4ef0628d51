#include "neuronscope/grpo.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <regex>
#include <sstream>

#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/parallel.hpp"
#include "neuronscope/text.hpp"
#include "neuronscope/vocabulary.hpp"

namespace neuronscope {

namespace {

const std::regex& numeric_literal() {
  static const std::regex re(R"(-?\d[\d,]*(?:\.\d+)?(?:/\d+)?)");
  return re;
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::string strip_trailing_dots(std::string s) {
  while (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

std::optional<std::string> last_numeric(std::string_view text) {
  const std::string s(text);
  std::optional<std::string> last;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), numeric_literal());
       it != std::sregex_iterator(); ++it) {
    last = it->str();
  }
  return last;
}

std::optional<double> parse_decimal(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Whole-string number: "1,234", "-3.5", "7/2", "12." all parse.
std::optional<double> parse_number(std::string_view raw) {
  std::string s;
  for (char c : collapse_whitespace(raw)) {
    if (c != ',') s.push_back(c);
  }
  s = strip_trailing_dots(std::move(s));
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.erase(0, 1);
  const auto slash = s.find('/');
  if (slash == std::string::npos) return parse_decimal(s);
  const auto num = parse_decimal(std::string_view(s).substr(0, slash));
  const auto den = parse_decimal(std::string_view(s).substr(slash + 1));
  if (!num || !den || *den == 0.0) return std::nullopt;
  return *num / *den;
}

std::optional<double> numeric_value(std::string_view answer) {
  if (auto v = parse_number(answer)) return v;
  if (auto lit = last_numeric(answer)) return parse_number(*lit);
  return std::nullopt;
}

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos;
       pos = text.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t rollout_seed(std::uint64_t seed, int step, std::size_t prompt, int member) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(step));
  h = splitmix64(h ^ static_cast<std::uint64_t>(prompt));
  return splitmix64(h ^ static_cast<std::uint64_t>(member));
}

void add_into(Params<double>& dst, const Params<double>& src) {
  auto d = named_tensors(dst);
  const auto s = named_tensors(src);
  for (std::size_t t = 0; t < d.size(); ++t) *d[t].second += *s[t].second;
}

struct Rollout {
  std::size_t group = 0;
  std::size_t member = 0;
  TokenSequence full;  // prompt + response
  std::size_t prompt_len = 0;
  std::vector<double> old_logprobs;  // per response token
  double advantage = 0.0;
};

struct SampleLoss {
  double loss = 0.0;
  double kl_sum = 0.0;
  std::size_t tokens = 0;
  std::size_t clipped = 0;
};

// Accumulates weight * d(loss)/d(params) for one rollout, where loss is the
// per-token mean of -(clipped surrogate) + beta * KL(policy || reference).
SampleLoss rollout_gradient(const Engine& policy, const Engine& reference, const Rollout& r,
                            const GrpoConfig& cfg, double weight, Params<double>& grads) {
  SampleLoss out;
  const std::size_t n = r.full.size() - r.prompt_len;
  if (n == 0) return out;
  const LayerTrace trace = policy.forward(r.full);
  const MatrixD lp = log_softmax_rows(trace.logits);
  const MatrixD lq = log_softmax_rows(reference.forward(r.full).logits);
  MatrixD dlogits = MatrixD::Zero(lp.rows(), lp.cols());
  const double w = weight / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = static_cast<Eigen::Index>(r.prompt_len + j - 1);
    const int tok = r.full.ids[r.prompt_len + j];
    const RowVectorD p = lp.row(row).array().exp().matrix();
    const RowVectorD diff = lp.row(row) - lq.row(row);
    // Clamps rounding below zero; a NaN passes through to the finiteness check.
    const double kl_raw = p.dot(diff);
    const double kl = kl_raw < 0.0 ? 0.0 : kl_raw;
    const double ratio = std::exp(lp(row, tok) - r.old_logprobs[j]);
    const double clipped_ratio = std::clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    const double unclipped_obj = ratio * r.advantage;
    const double clipped_obj = clipped_ratio * r.advantage;
    const bool active = unclipped_obj <= clipped_obj;
    if (!active) ++out.clipped;
    const double obj = std::min(unclipped_obj, clipped_obj);
    out.loss += (-obj + cfg.kl_coef * kl) / static_cast<double>(n);
    out.kl_sum += kl;
    ++out.tokens;

    RowVectorD g = cfg.kl_coef * (p.array() * (diff.array() - kl)).matrix();
    if (active && r.advantage != 0.0) {
      g += r.advantage * ratio * p;
      g(tok) -= r.advantage * ratio;
    }
    dlogits.row(row) = g * w;
  }
  policy.backward(trace, dlogits, grads);
  return out;
}

constexpr std::size_t kGradChunks = 8;

}  // namespace

std::string extract_answer(std::string_view text) {
  const std::string lower = to_lower_ascii(text);
  const auto marker = lower.rfind("answer:");
  if (marker != std::string::npos) {
    const auto begin = marker + 7;
    const auto end = text.find('\n', begin);
    std::string span = strip_trailing_dots(collapse_whitespace(
        text.substr(begin, end == std::string_view::npos ? std::string_view::npos : end - begin)));
    if (!span.empty()) return span;
  }
  if (auto lit = last_numeric(text)) {
    std::string s;
    for (char c : *lit) {
      if (c != ',') s.push_back(c);
    }
    return s;
  }
  return {};
}

bool answers_match(std::string_view candidate, std::string_view gold) {
  const std::string c = strip_trailing_dots(collapse_whitespace(candidate));
  const std::string g = strip_trailing_dots(collapse_whitespace(gold));
  if (c.empty() || g.empty()) return false;
  const auto gv = parse_number(g);
  if (gv) {
    const auto cv = numeric_value(c);
    return cv && std::abs(*cv - *gv) <= 1e-9 * std::max(1.0, std::abs(*gv));
  }
  return to_lower_ascii(c) == to_lower_ascii(g);
}

double outcome_reward(std::string_view response_text, std::string_view gold_answer) {
  const std::string answer = extract_answer(response_text);
  return !answer.empty() && answers_match(answer, gold_answer) ? kCorrectReward
                                                                : kIncorrectReward;
}

double format_reward(std::string_view text) {
  constexpr std::string_view open = "<think>";
  constexpr std::string_view close = "</think>";
  if (count_occurrences(text, open) != 1 || count_occurrences(text, close) != 1) {
    return kNoFormatReward;
  }
  const auto o = text.find(open);
  const auto c = text.find(close);
  if (c < o) return kNoFormatReward;
  const auto inner = trim(text.substr(o + open.size(), c - o - open.size()));
  const auto after = trim(text.substr(c + close.size()));
  return inner.empty() || after.empty() ? kNoFormatReward : kFormatReward;
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  std::vector<double> out(rewards.size(), 0.0);
  if (rewards.empty()) return out;
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(rewards.size()));
  if (sd == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (sd + 1e-8);
  return out;
}

void GrpoConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("grpo config: " + m); };
  if (group_size < 2) fail("group_size must be >= 2");
  if (!(kl_coef >= 0.0) || !std::isfinite(kl_coef)) fail("kl_coef must be finite and >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    fail("learning_rate must be finite and >= 0");
  }
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (mini_batch < 1) fail("mini_batch must be >= 1");
  if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) fail("clip_ratio must lie in (0, 1)");
  if (max_response_tokens < 1) fail("max_response_tokens must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) fail("temperature must be > 0");
}

nlohmann::json to_json(const GrpoConfig& cfg) {
  return {{"group_size", cfg.group_size},
          {"kl_coef", cfg.kl_coef},
          {"learning_rate", cfg.learning_rate},
          {"batch_size", cfg.batch_size},
          {"mini_batch", cfg.mini_batch},
          {"clip_ratio", cfg.clip_ratio},
          {"max_response_tokens", cfg.max_response_tokens},
          {"temperature", cfg.temperature},
          {"outcome_weight", cfg.outcome_weight},
          {"format_weight", cfg.format_weight},
          {"seed", cfg.seed}};
}

GrpoConfig grpo_config_from_json(const nlohmann::json& j) {
  GrpoConfig cfg;
  try {
    cfg.group_size = j.value("group_size", cfg.group_size);
    cfg.kl_coef = j.value("kl_coef", cfg.kl_coef);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.mini_batch = j.value("mini_batch", cfg.mini_batch);
    cfg.clip_ratio = j.value("clip_ratio", cfg.clip_ratio);
    cfg.max_response_tokens = j.value("max_response_tokens", cfg.max_response_tokens);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.outcome_weight = j.value("outcome_weight", cfg.outcome_weight);
    cfg.format_weight = j.value("format_weight", cfg.format_weight);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grpo config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RewardFn text_reward(const Vocabulary& vocab) {
  return [&vocab](const Task& task, const TokenSequence& response) {
    const std::string text = vocab.decode(response.ids);
    return RewardPair{outcome_reward(text, task.gold_answer), format_reward(text)};
  };
}

nlohmann::json StepStats::to_json() const {
  return {{"step", step},
          {"mean_reward", mean_reward},
          {"mean_outcome_reward", mean_outcome_reward},
          {"mean_format_reward", mean_format_reward},
          {"mean_kl", mean_kl},
          {"clip_fraction", clip_fraction},
          {"loss", loss}};
}

GrpoTrainer::GrpoTrainer(Model policy, Model reference, GrpoConfig cfg, RewardFn reward,
                         int threads)
    : policy_(std::move(policy)),
      reference_(std::move(reference)),
      cfg_(cfg),
      reward_(std::move(reward)),
      threads_(resolve_threads(threads)),
      mask_(InterventionMask::all(policy_.config)),
      opt_cfg_([&] {
        TrainConfig t;
        t.learning_rate = cfg.learning_rate;
        t.optimizer = OptimizerKind::adam;
        return t;
      }()),
      optimizer_(opt_cfg_, mask_) {
  cfg_.validate();
  policy_.validate();
  reference_.validate();
  if (!(policy_.config == reference_.config)) {
    throw ConfigError("policy and reference configurations differ");
  }
  if (!reward_) throw ArgumentError("reward function is empty");
}

StepStats GrpoTrainer::step(const std::vector<Task>& prompts) {
  if (prompts.empty()) throw ArgumentError("grpo step needs at least one prompt");
  const auto& mc = policy_.config;
  const std::size_t n_prompts = std::min(prompts.size(), static_cast<std::size_t>(cfg_.batch_size));
  const auto g_size = static_cast<std::size_t>(cfg_.group_size);
  for (std::size_t i = 0; i < n_prompts; ++i) {
    check_tokens(prompts[i].prompt, mc);
    if (static_cast<int>(prompts[i].prompt.size()) >= mc.max_seq_len) {
      throw LengthError("prompt " + std::to_string(i) + " leaves no room for a response");
    }
  }

  // Rollouts from the pre-step policy.
  const Engine old_engine(policy_);
  std::vector<Rollout> rollouts(n_prompts * g_size);
  parallel_for(rollouts.size(), threads_, [&](std::size_t k) {
    Rollout& r = rollouts[k];
    r.group = k / g_size;
    r.member = k % g_size;
    const TokenSequence& prompt = prompts[r.group].prompt;
    DecodeConfig decode;
    decode.temperature = cfg_.temperature;
    decode.max_new_tokens = cfg_.max_response_tokens;
    decode.seed = rollout_seed(cfg_.seed, step_, r.group, static_cast<int>(r.member));
    r.full = sample(old_engine, TokenSequence{prompt.ids, std::nullopt}, decode);
    r.prompt_len = prompt.size();
    if (r.full.size() > r.prompt_len) {
      const auto lps = logprobs(old_engine, r.full);
      r.old_logprobs.assign(lps.begin() + static_cast<std::ptrdiff_t>(r.prompt_len - 1), lps.end());
    }
  });

  std::vector<RewardedGroup> groups(n_prompts);
  StepStats stats;
  stats.step = step_;
  for (std::size_t gi = 0; gi < n_prompts; ++gi) {
    RewardedGroup& g = groups[gi];
    g.prompt = prompts[gi].prompt;
    for (std::size_t m = 0; m < g_size; ++m) {
      const Rollout& r = rollouts[gi * g_size + m];
      TokenSequence resp{std::vector<int>(r.full.ids.begin() + static_cast<std::ptrdiff_t>(r.prompt_len),
                                          r.full.ids.end()),
                         std::nullopt};
      const RewardPair rw = reward_(prompts[gi], resp);
      g.responses.push_back(std::move(resp));
      g.outcome.push_back(rw.outcome);
      g.format.push_back(rw.format);
      g.total.push_back(cfg_.outcome_weight * rw.outcome + cfg_.format_weight * rw.format);
      stats.mean_outcome_reward += rw.outcome;
      stats.mean_format_reward += rw.format;
      stats.mean_reward += g.total.back();
    }
    g.advantage = group_advantages(g.total);
    for (std::size_t m = 0; m < g_size; ++m) rollouts[gi * g_size + m].advantage = g.advantage[m];
  }
  const auto n_rollouts = static_cast<double>(rollouts.size());
  stats.mean_reward /= n_rollouts;
  stats.mean_outcome_reward /= n_rollouts;
  stats.mean_format_reward /= n_rollouts;

  const Engine ref_engine(reference_);
  const auto mb = static_cast<std::size_t>(cfg_.mini_batch);
  double kl_sum = 0.0;
  std::size_t tokens = 0, clipped = 0, updates = 0;
  for (std::size_t start = 0; start < n_prompts; start += mb) {
    const std::size_t stop = std::min(n_prompts, start + mb);
    const std::size_t first = start * g_size;
    const std::size_t count = (stop - start) * g_size;
    const Engine engine(policy_);
    const double weight = 1.0 / static_cast<double>(count);
    const std::size_t chunks = std::min(kGradChunks, count);
    std::vector<Params<double>> partial(chunks, zeros_like<double>(mc));
    std::vector<SampleLoss> losses(count);
    parallel_for(chunks, threads_, [&](std::size_t c) {
      for (std::size_t k = c; k < count; k += chunks) {
        losses[k] = rollout_gradient(engine, ref_engine, rollouts[first + k], cfg_, weight,
                                     partial[c]);
      }
    });
    double batch_loss = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      batch_loss += losses[k].loss * weight;
      kl_sum += losses[k].kl_sum;
      tokens += losses[k].tokens;
      clipped += losses[k].clipped;
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericError("non-finite GRPO loss at step " + std::to_string(step_) +
                         ", prompts [" + std::to_string(start) + ", " + std::to_string(stop) +
                         ")");
    }
    for (std::size_t c = 1; c < chunks; ++c) add_into(partial[0], partial[c]);
    optimizer_.step(policy_.params, partial[0]);
    stats.loss += batch_loss;
    ++updates;
  }
  stats.loss /= static_cast<double>(updates);
  stats.mean_kl = tokens == 0 ? 0.0 : kl_sum / static_cast<double>(tokens);
  stats.clip_fraction = tokens == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(tokens);
  last_groups_ = std::move(groups);
  ++step_;
  return stats;
}

GrpoStepResult grpo_step(const Model& policy, const Model& reference,
                         const std::vector<Task>& prompts, const GrpoConfig& cfg,
                         const RewardFn& reward) {
  GrpoTrainer trainer(policy, reference, cfg, reward);
  StepStats stats = trainer.step(prompts);
  return {trainer.policy(), stats};
}

std::vector<Task> load_tasks(const std::filesystem::path& path, const Vocabulary* vocab) {
  std::vector<Task> out;
  for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line) {
    if (!obj.contains("prompt")) throw DataError("missing field 'prompt'", line, "prompt");
    if (!obj.contains("gold_answer")) {
      throw DataError("missing field 'gold_answer'", line, "gold_answer");
    }
    Task t;
    t.prompt = tokens_from_json(obj["prompt"], vocab, line, "prompt");
    const auto& gold = obj["gold_answer"];
    if (gold.is_string()) {
      t.gold_answer = gold.get<std::string>();
    } else if (gold.is_number()) {
      t.gold_answer = gold.dump();
    } else {
      throw DataError("field 'gold_answer' must be a string or number", line, "gold_answer");
    }
    if (t.prompt.ids.empty()) throw DataError("empty prompt", line, "prompt");
    out.push_back(std::move(t));
  });
  return out;
}

}  // namespace neuronscope
