#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/engine.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/neurons.hpp"

namespace neuronscope {

// Trainable / zeroed parameter entries derived from a NeuronSet. entries[t]
// lists flat row-major offsets into the t-th tensor of named_tensors().
class InterventionMask {
 public:
  struct LayerIndices {
    std::vector<int> q_cols;
    std::vector<int> k_cols;
    std::vector<int> v_cols;
    std::vector<int> gate_up_cols;  // same columns of W_gate and W_up
    std::vector<int> down_rows;
  };

  // Throws ArgumentError on duplicate or out-of-range neuron ids.
  InterventionMask(const ModelConfig& config, const std::vector<NeuronId>& neurons);
  InterventionMask(const ModelConfig& config, const NeuronSet& set)
      : InterventionMask(config, set.neurons) {}

  // Every parameter of the model; used for ordinary full training.
  static InterventionMask all(const ModelConfig& config);

  const std::vector<std::vector<std::size_t>>& entries() const { return entries_; }
  const std::vector<LayerIndices>& layers() const { return layers_; }
  std::size_t parameter_count() const;
  bool covers(std::size_t tensor, std::size_t flat) const;

 private:
  InterventionMask() = default;

  std::vector<std::vector<std::size_t>> entries_;  // each sorted
  std::vector<LayerIndices> layers_;
};

// Copy of the model with every parameter of the selected neurons zeroed.
Model deactivate(const Model& model, const NeuronSet& neurons);
Model deactivate(const Model& model, const std::vector<NeuronId>& neurons);

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double learning_rate = 1e-2;
  int steps = 100;
  int batch_size = 8;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Held-out early stop; 0 disables it.
  int early_stop_patience = 0;
  int eval_every = 10;

  // Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Adam or SGD restricted to the entries of a mask; other entries are never written.
class MaskedOptimizer {
 public:
  MaskedOptimizer(const TrainConfig& cfg, const InterventionMask& mask);
  void step(Params<float>& params, const Params<double>& grads);

  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  const InterventionMask& mask_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// sum_t -log p(x_t | x_<t) over one sequence (length >= 2).
double sequence_nll(const Engine& engine, const TokenSequence& seq);

// Adds weight * d(sequence_nll)/d(params) into grads and returns the nll.
double sequence_nll_gradient(const Engine& engine, const TokenSequence& seq, double weight,
                             Params<double>& grads);

// Zeroes every gradient entry the mask does not cover.
void apply_mask(Params<double>& grads, const InterventionMask& mask);

struct TrainResult {
  Model model;
  std::vector<double> loss_curve;  // mean per-token nll of each step's batch, before the update
  std::vector<double> holdout_curve;
  int steps_run = 0;
};

// Minimises mean per-token next-token cross-entropy over the dataset, writing
// only the entries covered by the mask. Throws NumericError with the step and
// batch on a non-finite loss.
TrainResult train_masked(const Model& model, const InterventionMask& mask,
                         const std::vector<TokenSequence>& dataset, const TrainConfig& cfg,
                         const std::vector<TokenSequence>* holdout = nullptr, int threads = 1);

TrainResult tune_neurons(const Model& model, const NeuronSet& neurons,
                         const std::vector<TokenSequence>& dataset, const TrainConfig& cfg,
                         int threads = 1);

// {neuron_set, train_config, loss_curve, seed}
nlohmann::json provenance_json(const NeuronSet& neurons, const TrainConfig& cfg,
                               const TrainResult& result);

struct GradCheckEntry {
  std::string tensor;
  std::size_t flat = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

// Masked analytic gradient of sequence_nll.
Params<double> masked_gradient(const Model& model, const InterventionMask& mask,
                               const TokenSequence& sample);

// Central differences (step 1e-3 on the f32 weight, loss in f64) on up to
// max_entries randomly chosen masked entries. Pairs whose gradients are both
// below abs_floor count as agreeing.
GradCheckResult grad_check(const Model& model, const NeuronSet& neurons,
                           const TokenSequence& sample, std::uint64_t seed = 0,
                           std::size_t max_entries = 32, double step = 1e-3,
                           double abs_floor = 1e-7);

}  // namespace neuronscope
