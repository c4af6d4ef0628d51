#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/engine.hpp"
#include "neuronscope/neurons.hpp"

namespace neuronscope {

// Importance of a neuron on an input is the L2 norm (flattened over
// positions) of the change its deactivation causes in the quantity the
// neuron's submodule produces:
//   ffn_up / ffn_down : block output h_{i+1}
//   attn_v            : attention sublayer output (before the residual add)
//   attn_q / attn_k   : attention weights softmax(QK^T / sqrt(d)), all heads
// Zeroing an FFN neuron leaves the attention path untouched, so for FFN
// neurons the first two coincide.

enum class SequentialMeasure {
  native,        // the per-family quantity listed above
  block_output,  // always h_{i+1}, whatever the family
};

double importance_sequential(const Engine& engine, const TokenSequence& input,
                             const NeuronId& neuron,
                             SequentialMeasure measure = SequentialMeasure::native);
double importance_sequential(const Model& model, const TokenSequence& input,
                             const NeuronId& neuron,
                             SequentialMeasure measure = SequentialMeasure::native);

// Same quantity, reusing an existing trace of the input.
double importance_sequential(const Engine& engine, const LayerTrace& trace,
                             const NeuronId& neuron,
                             SequentialMeasure measure = SequentialMeasure::native);

struct FfnImportance {
  VectorD up;    // [d_inter]
  VectorD down;  // [d_inter]
};

// ||(h_ffn * Mask) W_down||_2 for all d_inter one-hot masks at once.
FfnImportance importance_ffn_parallel(const Engine& engine, const LayerTrace& trace, int layer);
FfnImportance importance_ffn_parallel(const Model& model, const TokenSequence& input, int layer);

enum class AttnMode {
  exact,        // softmax recomputed on (scores - Delta_k / sqrt(d))
  first_order,  // softmax Jacobian applied to -Delta_k / sqrt(d)
};

const char* to_string(AttnMode m);
AttnMode parse_attn_mode(const std::string& s);

struct AttnImportance {
  VectorD q;  // [d_mid]
  VectorD k;
  VectorD v;
};

inline constexpr std::size_t kDefaultDeltaBudgetBytes = std::size_t{1} << 30;

// Builds Delta(x)[t, s, k] = Q[t, k] * K[s, k] as one [l x l x d_mid] tensor and
// scores every q/k neuron from it; v neurons use the FFN-style mask formula
// through W_O. Throws ResourceError if the tensor exceeds budget_bytes.
AttnImportance importance_attn_parallel(const Engine& engine, const LayerTrace& trace, int layer,
                                        AttnMode mode = AttnMode::exact,
                                        std::size_t budget_bytes = kDefaultDeltaBudgetBytes);
AttnImportance importance_attn_parallel(const Model& model, const TokenSequence& input, int layer,
                                        AttnMode mode = AttnMode::exact);

// Delta tensor in [t][s][k] row-major order (exposed for tests).
std::vector<double> attention_delta(const MatrixD& q, const MatrixD& k);

// Per-layer, per-family importance vectors of one input, indexed by Submodule.
using InputImportance = std::vector<std::array<VectorD, 5>>;

InputImportance importance_all_layers(const Engine& engine, const TokenSequence& input,
                                      AttnMode mode = AttnMode::exact);

// Imp(N | c) for every neuron and every (deduplicated) input of a corpus.
struct ImportanceTable {
  std::string language;
  AttnMode attn_mode = AttnMode::exact;
  ModelConfig config;
  std::vector<TokenSequence> inputs;
  // values[layer][family] is [n_inputs x width].
  std::vector<std::array<MatrixD, 5>> values;

  std::size_t n_inputs() const { return inputs.size(); }
  const MatrixD& family(int layer, Submodule s) const {
    return values.at(static_cast<std::size_t>(layer))[static_cast<std::size_t>(s)];
  }
  double at(const NeuronId& n, std::size_t input) const {
    return family(n.layer, n.submodule)(static_cast<Eigen::Index>(input), n.index);
  }

  nlohmann::json summary() const;
  void save(const std::filesystem::path& path) const;
  static ImportanceTable load(const std::filesystem::path& path);
};

struct ImportanceOptions {
  AttnMode attn_mode = AttnMode::exact;
  int threads = 1;
};

// Duplicate inputs are dropped (first occurrence kept). Inputs are processed
// in parallel; the table does not depend on the thread count.
ImportanceTable compute_importance_table(const Engine& engine, std::vector<TokenSequence> corpus,
                                         const std::string& language,
                                         const ImportanceOptions& options = {});

// Largest |first_order - exact| / max(exact, floor) over the q/k neurons of a layer.
double attention_approximation_gap(const Engine& engine, const LayerTrace& trace, int layer,
                                   double floor = 1e-12);

}  // namespace neuronscope
