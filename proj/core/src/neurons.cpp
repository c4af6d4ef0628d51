#include "neuronscope/neurons.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "neuronscope/errors.hpp"

namespace neuronscope {

const char* to_string(Submodule s) {
  switch (s) {
    case Submodule::attn_q:
      return "attn_q";
    case Submodule::attn_k:
      return "attn_k";
    case Submodule::attn_v:
      return "attn_v";
    case Submodule::ffn_up:
      return "ffn_up";
    case Submodule::ffn_down:
      return "ffn_down";
  }
  return "?";
}

Submodule parse_submodule(const std::string& name) {
  for (Submodule s : kAllSubmodules) {
    if (name == to_string(s)) return s;
  }
  throw ArgumentError("unknown submodule '" + name + "'");
}

bool is_attention(Submodule s) {
  return s == Submodule::attn_q || s == Submodule::attn_k || s == Submodule::attn_v;
}

int submodule_width(const ModelConfig& config, Submodule s) {
  return is_attention(s) ? config.d_mid : config.d_inter;
}

void check_neuron(const NeuronId& n, const ModelConfig& config) {
  if (n.layer < 0 || n.layer >= config.n_layers) {
    throw ArgumentError("neuron layer " + std::to_string(n.layer) + " out of range [0, " +
                        std::to_string(config.n_layers) + ")");
  }
  const int width = submodule_width(config, n.submodule);
  if (n.index < 0 || n.index >= width) {
    throw ArgumentError(std::string(to_string(n.submodule)) + " index " +
                        std::to_string(n.index) + " out of range [0, " + std::to_string(width) +
                        ")");
  }
}

bool NeuronSet::contains(const NeuronId& n) const {
  return std::binary_search(neurons.begin(), neurons.end(), n);
}

NeuronSet NeuronSet::restricted_to_layers(int lo, int hi) const {
  NeuronSet out = *this;
  out.neurons.clear();
  for (const auto& n : neurons) {
    if (n.layer >= lo && n.layer < hi) out.neurons.push_back(n);
  }
  return out;
}

nlohmann::json NeuronSet::to_json() const {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& [key, value] : epsilon) {
    eps.push_back({{"layer", key.first}, {"submodule", to_string(key.second)}, {"value", value}});
  }
  nlohmann::json list = nlohmann::json::array();
  for (const auto& n : neurons) {
    list.push_back({{"layer", n.layer}, {"submodule", to_string(n.submodule)}, {"index", n.index}});
  }
  return {{"language", language},
          {"epsilon", eps},
          {"top_fraction", top_fraction},
          {"neurons", list}};
}

NeuronSet NeuronSet::from_json(const nlohmann::json& j) {
  NeuronSet set;
  try {
    set.language = j.at("language").get<std::string>();
    set.top_fraction = j.at("top_fraction").get<double>();
    for (const auto& e : j.at("epsilon")) {
      set.epsilon[{e.at("layer").get<int>(), parse_submodule(e.at("submodule"))}] =
          e.at("value").get<double>();
    }
    for (const auto& n : j.at("neurons")) {
      set.neurons.push_back(
          {n.at("layer").get<int>(), parse_submodule(n.at("submodule")), n.at("index").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("neuron set: ") + e.what());
  } catch (const ArgumentError& e) {
    throw DataError(std::string("neuron set: ") + e.what());
  }
  std::sort(set.neurons.begin(), set.neurons.end());
  if (std::adjacent_find(set.neurons.begin(), set.neurons.end()) != set.neurons.end()) {
    throw DataError("neuron set contains duplicate neuron ids");
  }
  return set;
}

void NeuronSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

NeuronSet NeuronSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

int early_layer_limit(const ModelConfig& config) {
  // layer < n_layers / 3, in integers: 3 * layer < n_layers.
  return (config.n_layers + 2) / 3;
}

}  // namespace neuronscope
