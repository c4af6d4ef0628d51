#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "neuronscope/model.hpp"
#include "neuronscope/tensor.hpp"

namespace neuronscope {

inline constexpr double kRmsEps = 1e-5;

// Everything a block computes on the way through; backward and the
// importance routines read from here instead of recomputing.
struct LayerCache {
  MatrixD input;  // h_i
  VectorD attn_rinv;
  MatrixD attn_in;  // RMSNorm(h_i) * gain
  MatrixD q, k, v;  // [l x d_mid]
  std::vector<MatrixD> probs;  // per head, [l x l], zero above the diagonal
  MatrixD attn_mix;  // concatenated head outputs, [l x d_mid]
  MatrixD attn_out;  // attn_mix * W_O
  MatrixD mid;  // h_i + attn_out
  VectorD ffn_rinv;
  MatrixD ffn_in;
  MatrixD gate, up;  // pre-activation projections, [l x d_inter]
  MatrixD hffn;  // SiLU(gate) * up
  MatrixD ffn_out;  // h_ffn * W_down
};

struct LayerTrace {
  std::vector<int> ids;
  // n_layers + 1 entries: h_0 is the embedding output, h_{n_layers} feeds the head.
  std::vector<MatrixD> hidden_states;
  // h_ffn = SiLU(x W_gate) * (x W_up), the activation entering W_down.
  std::vector<MatrixD> ffn_activations;
  // Scaled pre-softmax scores per layer and head; -inf above the diagonal.
  std::vector<std::vector<MatrixD>> attention_scores;
  MatrixD logits;  // [l x vocab_size]

  std::vector<LayerCache> layers;
  VectorD final_rinv;
  MatrixD final_normed;
};

MatrixD rms_norm(const MatrixD& x, const MatrixD& gain, VectorD* rinv_out = nullptr);

double silu(double x);

// Row-wise softmax over the causal prefix; entries above the diagonal are 0.
MatrixD causal_softmax(const MatrixD& scores);

// One pre-norm transformer block. When cache is given it is fully populated.
MatrixD block_forward(const ModelConfig& config, const LayerParams<double>& layer,
                      const MatrixD& h, LayerCache* cache = nullptr,
                      std::vector<MatrixD>* scores_out = nullptr);

// f64 copy of a model's weights plus the forward/backward passes over it.
// Immutable after construction; safe to share across threads.
class Engine {
 public:
  explicit Engine(const Model& model);
  Engine(ModelConfig config, Params<double> params);

  const ModelConfig& config() const { return config_; }
  const Params<double>& params() const { return params_; }

  // Throws LengthError when the sequence exceeds max_seq_len.
  LayerTrace forward(const TokenSequence& tokens) const;

  // Final norm (unless raw) followed by the tied output head.
  MatrixD project(const MatrixD& hidden, bool apply_final_norm = true) const;

  // Accumulates d(loss)/d(params) into grads given d(loss)/d(logits).
  void backward(const LayerTrace& trace, const MatrixD& dlogits, Params<double>& grads) const;

 private:
  ModelConfig config_;
  Params<double> params_;
};

LayerTrace forward(const Model& model, const TokenSequence& tokens);

MatrixD log_softmax_rows(const MatrixD& logits);

// Entry t is log P(w_{t+1} | w_0..w_t); length is len - 1.
std::vector<double> logprobs(const Model& model, const TokenSequence& tokens);
std::vector<double> logprobs(const Engine& engine, const TokenSequence& tokens);

struct DecodeConfig {
  double temperature = 0.0;  // 0 selects greedy decoding
  int max_new_tokens = 16;
  std::uint64_t seed = 0;
  bool stop_at_eos = true;
};

// Draws from softmax(logits / temperature) with a uniform variate u in [0, 1).
int sample_categorical(const RowVectorD& logits, double temperature, double u);

// Returned sequence starts with the prompt.
TokenSequence sample(const Model& model, const TokenSequence& prompt, const DecodeConfig& decode);
TokenSequence sample(const Engine& engine, const TokenSequence& prompt, const DecodeConfig& decode);

}  // namespace neuronscope
