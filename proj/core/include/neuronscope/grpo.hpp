#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/engine.hpp"
#include "neuronscope/intervention.hpp"
#include "neuronscope/model.hpp"

namespace neuronscope {

class Vocabulary;

inline constexpr double kCorrectReward = 2.0;
inline constexpr double kIncorrectReward = -2.0;
inline constexpr double kFormatReward = 1.0;
inline constexpr double kNoFormatReward = -1.0;

// Text after the last "answer:" marker (to end of line) when present,
// otherwise the last numeric literal; whitespace-normalized, "" if neither.
std::string extract_answer(std::string_view text);

// Numeric comparison when both sides parse as numbers (integers, decimals,
// fractions, thousands separators), otherwise case-insensitive text equality.
bool answers_match(std::string_view candidate, std::string_view gold);

// +2 when the extracted answer matches gold, -2 otherwise (including no answer).
double outcome_reward(std::string_view response_text, std::string_view gold_answer);

// +1 for exactly one non-empty <think>...</think> block followed by a
// non-empty answer segment, -1 otherwise.
double format_reward(std::string_view response_text);

// (r - mean) / (population std + 1e-8); all zeros for a constant group.
std::vector<double> group_advantages(const std::vector<double>& rewards);

struct GrpoConfig {
  int group_size = 8;
  double kl_coef = 0.001;
  double learning_rate = 3e-7;
  int batch_size = 32;  // prompts per step
  int mini_batch = 8;   // prompts per optimizer update
  double clip_ratio = 0.2;
  int max_response_tokens = 4096;
  double temperature = 1.0;
  double outcome_weight = 1.0;
  double format_weight = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const GrpoConfig& cfg);
GrpoConfig grpo_config_from_json(const nlohmann::json& j);

struct Task {
  TokenSequence prompt;
  std::string gold_answer;
};

struct RewardPair {
  double outcome = kIncorrectReward;
  double format = kNoFormatReward;
};

// Scores one sampled response (tokens after the prompt).
using RewardFn = std::function<RewardPair(const Task&, const TokenSequence& response)>;

// Decodes the response with the vocabulary and applies outcome/format rewards.
RewardFn text_reward(const Vocabulary& vocab);

struct RewardedGroup {
  TokenSequence prompt;
  std::vector<TokenSequence> responses;  // response tokens only
  std::vector<double> outcome;
  std::vector<double> format;
  std::vector<double> total;
  std::vector<double> advantage;
};

struct StepStats {
  int step = 0;
  double mean_reward = 0.0;
  double mean_outcome_reward = 0.0;
  double mean_format_reward = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double loss = 0.0;

  nlohmann::json to_json() const;
};

// Keeps the policy, a frozen reference and the optimizer state across steps.
class GrpoTrainer {
 public:
  GrpoTrainer(Model policy, Model reference, GrpoConfig cfg, RewardFn reward, int threads = 1);
  GrpoTrainer(const GrpoTrainer&) = delete;
  GrpoTrainer& operator=(const GrpoTrainer&) = delete;

  // Samples group_size responses per prompt from the current policy, scores
  // them, and applies the clipped surrogate with an exact per-token KL
  // penalty to the reference, one optimizer update per mini-batch of prompts.
  StepStats step(const std::vector<Task>& prompts);

  const Model& policy() const { return policy_; }
  const Model& reference() const { return reference_; }
  const std::vector<RewardedGroup>& last_groups() const { return last_groups_; }

 private:
  Model policy_;
  Model reference_;
  GrpoConfig cfg_;
  RewardFn reward_;
  int threads_;
  int step_ = 0;
  InterventionMask mask_;
  TrainConfig opt_cfg_;
  MaskedOptimizer optimizer_;
  std::vector<RewardedGroup> last_groups_;
};

struct GrpoStepResult {
  Model policy;
  StepStats stats;
};

GrpoStepResult grpo_step(const Model& policy, const Model& reference,
                         const std::vector<Task>& prompts, const GrpoConfig& cfg,
                         const RewardFn& reward);

// JSONL {prompt, gold_answer}; prompt is text (needs vocab) or token ids.
std::vector<Task> load_tasks(const std::filesystem::path& path, const Vocabulary* vocab);

}  // namespace neuronscope
