#pragma once

#include <array>
#include <compare>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/model.hpp"

namespace neuronscope {

enum class Submodule { attn_q, attn_k, attn_v, ffn_up, ffn_down };

inline constexpr std::array<Submodule, 5> kAllSubmodules = {
    Submodule::attn_q, Submodule::attn_k, Submodule::attn_v, Submodule::ffn_up,
    Submodule::ffn_down};

const char* to_string(Submodule s);
Submodule parse_submodule(const std::string& name);
bool is_attention(Submodule s);
// d_mid for attention projections, d_inter for the FFN.
int submodule_width(const ModelConfig& config, Submodule s);

// One intermediate coordinate of a projection: column `index` of W_Q/W_K/W_V,
// the gated column pair of W_gate/W_up (ffn_up), or row `index` of W_down.
struct NeuronId {
  int layer = 0;
  Submodule submodule = Submodule::ffn_up;
  int index = 0;

  auto operator<=>(const NeuronId&) const = default;
};

// Throws ArgumentError when the id does not address a neuron of the model.
void check_neuron(const NeuronId& n, const ModelConfig& config);

// Zeroes every parameter that belongs to the neuron.
template <typename T>
void zero_neuron(LayerParams<T>& layer, Submodule s, int index) {
  switch (s) {
    case Submodule::attn_q:
      layer.wq.col(index).setZero();
      break;
    case Submodule::attn_k:
      layer.wk.col(index).setZero();
      break;
    case Submodule::attn_v:
      layer.wv.col(index).setZero();
      break;
    case Submodule::ffn_up:
      layer.w_gate.col(index).setZero();
      layer.w_up.col(index).setZero();
      break;
    case Submodule::ffn_down:
      layer.w_down.row(index).setZero();
      break;
  }
}

using GroupKey = std::pair<int, Submodule>;  // (layer, submodule family)

struct NeuronSet {
  std::string language;
  std::vector<NeuronId> neurons;  // sorted, unique
  double top_fraction = 0.01;
  // Selection threshold per (layer, family) that contributed candidates.
  std::map<GroupKey, double> epsilon;

  bool empty() const { return neurons.empty(); }
  std::size_t size() const { return neurons.size(); }
  bool contains(const NeuronId& n) const;

  // Keeps neurons with lo <= layer < hi.
  NeuronSet restricted_to_layers(int lo, int hi) const;

  nlohmann::json to_json() const;
  // Throws DataError on schema violations or duplicate ids.
  static NeuronSet from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static NeuronSet load(const std::filesystem::path& path);
};

// Layers below n_layers / 3 (the "early" band used for deactivation runs).
int early_layer_limit(const ModelConfig& config);

}  // namespace neuronscope
