#include "neuronscope/selection.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "neuronscope/errors.hpp"
#include "neuronscope/parallel.hpp"

namespace neuronscope {

double top_fraction_threshold(const MatrixD& values, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction < 1.0)) {
    throw ArgumentError("top_fraction must lie in (0, 1)");
  }
  if (values.size() == 0) throw ArgumentError("cannot take a quantile of no values");
  std::vector<double> pool(values.data(), values.data() + values.size());
  const auto count = static_cast<double>(pool.size());
  // Tolerate top_fraction * count landing a hair above an integer.
  const auto m = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(top_fraction * count - 1e-9)));
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m - 1), pool.end(),
                   std::greater<>());
  return pool[m - 1];
}

NeuronSet select_language_neurons(const ImportanceTable& target, double top_fraction) {
  if (target.n_inputs() == 0) throw ArgumentError("importance table has no inputs");
  NeuronSet set;
  set.language = target.language;
  set.top_fraction = top_fraction;
  for (std::size_t i = 0; i < target.values.size(); ++i) {
    for (Submodule s : kAllSubmodules) {
      const MatrixD& m = target.values[i][static_cast<std::size_t>(s)];
      const double eps = top_fraction_threshold(m, top_fraction);
      set.epsilon[{static_cast<int>(i), s}] = eps;
      const RowVectorD worst = m.colwise().minCoeff();
      for (Eigen::Index k = 0; k < worst.size(); ++k) {
        if (worst(k) >= eps) set.neurons.push_back({static_cast<int>(i), s, static_cast<int>(k)});
      }
    }
  }
  std::sort(set.neurons.begin(), set.neurons.end());
  return set;
}

NeuronSet select_language_neurons(const std::map<std::string, ImportanceTable>& tables,
                                  const std::string& target, double top_fraction, bool contrast,
                                  const std::string& reference) {
  auto it = tables.find(target);
  if (it == tables.end()) throw ArgumentError("no importance table for language '" + target + "'");
  NeuronSet set = select_language_neurons(it->second, top_fraction);
  if (!contrast || reference == target) return set;
  auto ref = tables.find(reference);
  if (ref == tables.end()) {
    throw ArgumentError("contrast requested but no table for reference language '" + reference +
                        "'");
  }
  const NeuronSet ref_set = select_language_neurons(ref->second, top_fraction);
  std::erase_if(set.neurons, [&](const NeuronId& n) { return ref_set.contains(n); });
  return set;
}

namespace {

double threshold_for(const NeuronSet& set, const NeuronId& n) {
  auto it = set.epsilon.find({n.layer, n.submodule});
  if (it == set.epsilon.end()) {
    throw ArgumentError("neuron set has no threshold for layer " + std::to_string(n.layer) + " " +
                        to_string(n.submodule));
  }
  return it->second;
}

ActivationRatio finish(std::vector<double> per_input, std::size_t considered) {
  ActivationRatio out;
  out.considered = considered;
  if (considered == 0 || per_input.empty()) return out;
  double sum = 0.0;
  for (double r : per_input) sum += r;
  out.ratio = sum / static_cast<double>(per_input.size());
  out.per_input = std::move(per_input);
  return out;
}

}  // namespace

ActivationRatio activation_ratio(const ImportanceTable& table, const NeuronSet& neurons,
                                 int layer_lo, int layer_hi) {
  const NeuronSet sub = neurons.restricted_to_layers(layer_lo, layer_hi);
  if (sub.empty()) return finish({}, 0);
  std::vector<double> per_input(table.n_inputs());
  for (std::size_t c = 0; c < table.n_inputs(); ++c) {
    std::size_t active = 0;
    for (const auto& n : sub.neurons) {
      if (table.at(n, c) >= threshold_for(sub, n)) ++active;
    }
    per_input[c] = static_cast<double>(active) / static_cast<double>(sub.size());
  }
  return finish(std::move(per_input), sub.size());
}

ActivationRatio activation_ratio(const Engine& engine, const NeuronSet& neurons,
                                 const std::vector<TokenSequence>& corpus, int layer_lo,
                                 int layer_hi, const ImportanceOptions& options) {
  const NeuronSet sub = neurons.restricted_to_layers(layer_lo, layer_hi);
  if (sub.empty()) return finish({}, 0);
  if (corpus.empty()) throw ArgumentError("activation ratio needs a non-empty corpus");
  for (const auto& n : sub.neurons) check_neuron(n, engine.config());
  std::vector<double> per_input(corpus.size());
  parallel_for(corpus.size(), options.threads, [&](std::size_t c) {
    const InputImportance imp = importance_all_layers(engine, corpus[c], options.attn_mode);
    std::size_t active = 0;
    for (const auto& n : sub.neurons) {
      const double v = imp[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(n.submodule)](n.index);
      if (v >= threshold_for(sub, n)) ++active;
    }
    per_input[c] = static_cast<double>(active) / static_cast<double>(sub.size());
  });
  return finish(std::move(per_input), sub.size());
}

}  // namespace neuronscope
