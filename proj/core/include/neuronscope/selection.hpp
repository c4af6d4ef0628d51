#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuronscope/importance.hpp"
#include "neuronscope/neurons.hpp"

namespace neuronscope {

// Nearest-rank (1 - top_fraction) quantile of all values: the m-th largest,
// m = max(1, ceil(top_fraction * count)).
double top_fraction_threshold(const MatrixD& values, double top_fraction);

// A neuron is selected when its importance reaches the threshold of its
// (layer, family) pool on every input of the table. May return an empty set.
NeuronSet select_language_neurons(const ImportanceTable& target, double top_fraction);

// With contrast, neurons that are also selected for `reference` are dropped.
NeuronSet select_language_neurons(const std::map<std::string, ImportanceTable>& tables,
                                  const std::string& target, double top_fraction, bool contrast,
                                  const std::string& reference = "en");

struct ActivationRatio {
  std::optional<double> ratio;  // nullopt when no set member lies in the layer range
  std::vector<double> per_input;
  std::size_t considered = 0;  // set members inside the layer range
};

// Fraction of set members (restricted to layer_lo <= layer < layer_hi) whose
// importance on an input reaches their selection threshold, averaged over inputs.
ActivationRatio activation_ratio(const ImportanceTable& table, const NeuronSet& neurons,
                                 int layer_lo, int layer_hi);
ActivationRatio activation_ratio(const Engine& engine, const NeuronSet& neurons,
                                 const std::vector<TokenSequence>& corpus, int layer_lo,
                                 int layer_hi, const ImportanceOptions& options = {});

}  // namespace neuronscope
