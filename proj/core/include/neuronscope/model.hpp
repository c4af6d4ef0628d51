#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/tensor.hpp"

namespace neuronscope {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kReservedTokens = 4;

struct ModelConfig {
  int n_layers = 2;
  int d_model = 16;
  int d_inter = 32;
  int n_heads = 2;
  // Total attention projection width, n_heads * per-head width.
  int d_mid = 16;
  int vocab_size = 32;
  int max_seq_len = 64;

  int head_dim() const { return d_mid / n_heads; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Row-vector convention: activations are [positions x width] and a projection
// is applied as x * W, so W_Q is [d_model x d_mid] and W_down is
// [d_inter x d_model]. Norm gains are stored as [1 x d_model].
template <typename T>
struct LayerParams {
  Matrix<T> attn_norm;
  Matrix<T> wq;
  Matrix<T> wk;
  Matrix<T> wv;
  Matrix<T> wo;
  Matrix<T> ffn_norm;
  Matrix<T> w_gate;
  Matrix<T> w_up;
  Matrix<T> w_down;
};

template <typename T>
struct Params {
  Matrix<T> token_embedding;     // [vocab_size x d_model], also the output head
  Matrix<T> position_embedding;  // [max_seq_len x d_model]
  std::vector<LayerParams<T>> layers;
  Matrix<T> final_norm;
};

// Canonical tensor order, shared by bundles, masks and optimizers.
template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> named_tensors(Params<T>& p) {
  std::vector<std::pair<std::string, Matrix<T>*>> out;
  out.emplace_back("token_embedding", &p.token_embedding);
  out.emplace_back("position_embedding", &p.position_embedding);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.emplace_back(pre + "attn_norm", &l.attn_norm);
    out.emplace_back(pre + "wq", &l.wq);
    out.emplace_back(pre + "wk", &l.wk);
    out.emplace_back(pre + "wv", &l.wv);
    out.emplace_back(pre + "wo", &l.wo);
    out.emplace_back(pre + "ffn_norm", &l.ffn_norm);
    out.emplace_back(pre + "w_gate", &l.w_gate);
    out.emplace_back(pre + "w_up", &l.w_up);
    out.emplace_back(pre + "w_down", &l.w_down);
  }
  out.emplace_back("final_norm", &p.final_norm);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> named_tensors(const Params<T>& p) {
  auto mut = named_tensors(const_cast<Params<T>&>(p));
  std::vector<std::pair<std::string, const Matrix<T>*>> out;
  out.reserve(mut.size());
  for (auto& [name, ptr] : mut) out.emplace_back(std::move(name), ptr);
  return out;
}

// Expected [rows, cols] of every tensor in canonical order.
std::vector<std::pair<std::string, std::pair<int, int>>> tensor_shapes(const ModelConfig& c);

template <typename T>
Params<T> zeros_like(const ModelConfig& c) {
  Params<T> p;
  p.token_embedding = Matrix<T>::Zero(c.vocab_size, c.d_model);
  p.position_embedding = Matrix<T>::Zero(c.max_seq_len, c.d_model);
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm = Matrix<T>::Zero(1, c.d_model);
    l.wq = Matrix<T>::Zero(c.d_model, c.d_mid);
    l.wk = Matrix<T>::Zero(c.d_model, c.d_mid);
    l.wv = Matrix<T>::Zero(c.d_model, c.d_mid);
    l.wo = Matrix<T>::Zero(c.d_mid, c.d_model);
    l.ffn_norm = Matrix<T>::Zero(1, c.d_model);
    l.w_gate = Matrix<T>::Zero(c.d_model, c.d_inter);
    l.w_up = Matrix<T>::Zero(c.d_model, c.d_inter);
    l.w_down = Matrix<T>::Zero(c.d_inter, c.d_model);
  }
  p.final_norm = Matrix<T>::Zero(1, c.d_model);
  return p;
}

template <typename To, typename From>
Params<To> cast_params(const Params<From>& in) {
  Params<To> out;
  out.token_embedding = in.token_embedding.template cast<To>();
  out.position_embedding = in.position_embedding.template cast<To>();
  out.layers.reserve(in.layers.size());
  for (const auto& l : in.layers) {
    out.layers.push_back({l.attn_norm.template cast<To>(), l.wq.template cast<To>(),
                          l.wk.template cast<To>(), l.wv.template cast<To>(),
                          l.wo.template cast<To>(), l.ffn_norm.template cast<To>(),
                          l.w_gate.template cast<To>(), l.w_up.template cast<To>(),
                          l.w_down.template cast<To>()});
  }
  out.final_norm = in.final_norm.template cast<To>();
  return out;
}

// Decoder-only transformer: pre-norm RMSNorm blocks, learned absolute
// positions, SiLU-gated FFN, output head tied to the token embedding.
// Weights are f32; every computation over them runs in f64.
struct Model {
  ModelConfig config;
  Params<float> params;

  // Throws ConfigError on shape mismatch or non-finite weights.
  void validate() const;

  bool operator==(const Model& other) const;
};

Model init_random(const ModelConfig& config, std::uint64_t seed);

// Byte-level equality of every tensor; the determinism and isolation checks
// compare this rather than float ==, which conflates +0/-0.
bool bit_identical(const Params<float>& a, const Params<float>& b);

struct TokenSequence {
  std::vector<int> ids;
  std::optional<std::string> source_text;

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// Throws ArgumentError if empty or any id is outside the vocabulary.
void check_tokens(const TokenSequence& tokens, const ModelConfig& config);

// Weight bundle: u64 little-endian header length, JSON header
// {format_version, config, tensors: {name: {dtype, shape, offset}}}, then raw
// little-endian f32 data in directory order.
void save_bundle(const Model& model, const std::filesystem::path& path);
Model load_bundle(const std::filesystem::path& path);

}  // namespace neuronscope
