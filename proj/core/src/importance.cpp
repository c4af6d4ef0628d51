#include "neuronscope/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>

#include "neuronscope/errors.hpp"
#include "neuronscope/parallel.hpp"
#include "neuronscope/tensor_file.hpp"

namespace neuronscope {

namespace {

constexpr int kTableFormatVersion = 1;

double probs_distance(const std::vector<MatrixD>& a, const std::vector<MatrixD>& b) {
  double sq = 0.0;
  for (std::size_t h = 0; h < a.size(); ++h) sq += (a[h] - b[h]).squaredNorm();
  return std::sqrt(sq);
}

// Per-neuron norm of a rank-1 update: ||act[:, k]|| * ||proj[k, :]||.
VectorD masked_projection_norms(const MatrixD& act, const MatrixD& proj) {
  return act.colwise().norm().transpose().cwiseProduct(proj.rowwise().norm());
}

std::string table_key(int layer, Submodule s) {
  return "layers." + std::to_string(layer) + "." + to_string(s);
}

}  // namespace

double importance_sequential(const Engine& engine, const LayerTrace& trace,
                             const NeuronId& neuron, SequentialMeasure measure) {
  const auto& config = engine.config();
  check_neuron(neuron, config);
  const auto i = static_cast<std::size_t>(neuron.layer);
  LayerParams<double> layer = engine.params().layers[i];
  zero_neuron(layer, neuron.submodule, neuron.index);

  LayerCache cache;
  const MatrixD out = block_forward(config, layer, trace.hidden_states[i], &cache);
  if (measure == SequentialMeasure::block_output || !is_attention(neuron.submodule)) {
    return (out - trace.hidden_states[i + 1]).norm();
  }
  const LayerCache& base = trace.layers[i];
  if (neuron.submodule == Submodule::attn_v) return (cache.attn_out - base.attn_out).norm();
  return probs_distance(cache.probs, base.probs);
}

double importance_sequential(const Engine& engine, const TokenSequence& input,
                             const NeuronId& neuron, SequentialMeasure measure) {
  check_neuron(neuron, engine.config());
  return importance_sequential(engine, engine.forward(input), neuron, measure);
}

double importance_sequential(const Model& model, const TokenSequence& input,
                             const NeuronId& neuron, SequentialMeasure measure) {
  return importance_sequential(Engine(model), input, neuron, measure);
}

FfnImportance importance_ffn_parallel(const Engine& engine, const LayerTrace& trace, int layer) {
  check_neuron({layer, Submodule::ffn_up, 0}, engine.config());
  const auto i = static_cast<std::size_t>(layer);
  // Zeroing column k of W_gate/W_up zeroes h_ffn[:, k]; zeroing row k of
  // W_down removes the same rank-1 term, so both families share one value.
  VectorD imp = masked_projection_norms(trace.ffn_activations[i], engine.params().layers[i].w_down);
  return {imp, imp};
}

FfnImportance importance_ffn_parallel(const Model& model, const TokenSequence& input, int layer) {
  const Engine engine(model);
  return importance_ffn_parallel(engine, engine.forward(input), layer);
}

const char* to_string(AttnMode m) { return m == AttnMode::exact ? "exact" : "first_order"; }

AttnMode parse_attn_mode(const std::string& s) {
  if (s == "exact") return AttnMode::exact;
  if (s == "first_order" || s == "first-order") return AttnMode::first_order;
  throw ArgumentError("unknown attention importance mode '" + s + "'");
}

std::vector<double> attention_delta(const MatrixD& q, const MatrixD& k) {
  const auto l = static_cast<std::size_t>(q.rows());
  const auto d = static_cast<std::size_t>(q.cols());
  std::vector<double> delta(l * l * d);
  // q.reshape(l, 1, d) * k.reshape(1, l, d), broadcast over the two middle axes.
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t s = 0; s < l; ++s) {
      double* dst = delta.data() + (t * l + s) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = q(t, j) * k(s, j);
    }
  }
  return delta;
}

AttnImportance importance_attn_parallel(const Engine& engine, const LayerTrace& trace, int layer,
                                        AttnMode mode, std::size_t budget_bytes) {
  const auto& config = engine.config();
  check_neuron({layer, Submodule::attn_q, 0}, config);
  const auto i = static_cast<std::size_t>(layer);
  const LayerCache& c = trace.layers[i];
  const auto l = static_cast<std::size_t>(c.q.rows());
  const auto d_mid = static_cast<std::size_t>(config.d_mid);
  const std::size_t need = l * l * d_mid * sizeof(double);
  if (need > budget_bytes) {
    throw ResourceError("attention delta tensor needs " + std::to_string(need) +
                        " bytes (seq_len^2 * d_mid * 8) but the budget is " +
                        std::to_string(budget_bytes) +
                        "; shorten the inputs or raise the delta budget");
  }
  const std::vector<double> delta = attention_delta(c.q, c.k);
  const int dh = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& scores = trace.attention_scores[i];

  AttnImportance out;
  out.q = VectorD::Zero(config.d_mid);
  MatrixD shifted(l, l);
  for (int h = 0; h < config.n_heads; ++h) {
    const MatrixD& p = c.probs[static_cast<std::size_t>(h)];
    const MatrixD& s = scores[static_cast<std::size_t>(h)];
    for (int j = h * dh; j < (h + 1) * dh; ++j) {
      double sq = 0.0;
      if (mode == AttnMode::exact) {
        shifted = s;
        for (std::size_t t = 0; t < l; ++t) {
          for (std::size_t u = 0; u <= t; ++u) shifted(t, u) -= delta[(t * l + u) * d_mid + j] * scale;
        }
        sq = (causal_softmax(shifted) - p).squaredNorm();
      } else {
        for (std::size_t t = 0; t < l; ++t) {
          double mean_shift = 0.0;
          for (std::size_t u = 0; u <= t; ++u) mean_shift += p(t, u) * delta[(t * l + u) * d_mid + j];
          for (std::size_t u = 0; u <= t; ++u) {
            const double dp = -p(t, u) * (delta[(t * l + u) * d_mid + j] - mean_shift) * scale;
            sq += dp * dp;
          }
        }
      }
      out.q(j) = std::sqrt(sq);
    }
  }
  // Zeroing W_K[:, j] removes the same rank-1 term Q[:, j] K[:, j]^T from the scores.
  out.k = out.q;
  out.v = masked_projection_norms(c.attn_mix, engine.params().layers[i].wo);
  return out;
}

AttnImportance importance_attn_parallel(const Model& model, const TokenSequence& input, int layer,
                                        AttnMode mode) {
  const Engine engine(model);
  return importance_attn_parallel(engine, engine.forward(input), layer, mode);
}

InputImportance importance_all_layers(const Engine& engine, const TokenSequence& input,
                                      AttnMode mode) {
  const LayerTrace trace = engine.forward(input);
  InputImportance out(static_cast<std::size_t>(engine.config().n_layers));
  for (int i = 0; i < engine.config().n_layers; ++i) {
    auto ffn = importance_ffn_parallel(engine, trace, i);
    auto attn = importance_attn_parallel(engine, trace, i, mode);
    auto& slot = out[static_cast<std::size_t>(i)];
    slot[static_cast<std::size_t>(Submodule::attn_q)] = std::move(attn.q);
    slot[static_cast<std::size_t>(Submodule::attn_k)] = std::move(attn.k);
    slot[static_cast<std::size_t>(Submodule::attn_v)] = std::move(attn.v);
    slot[static_cast<std::size_t>(Submodule::ffn_up)] = std::move(ffn.up);
    slot[static_cast<std::size_t>(Submodule::ffn_down)] = std::move(ffn.down);
  }
  return out;
}

ImportanceTable compute_importance_table(const Engine& engine, std::vector<TokenSequence> corpus,
                                         const std::string& language,
                                         const ImportanceOptions& options) {
  ImportanceTable table;
  table.language = language;
  table.attn_mode = options.attn_mode;
  table.config = engine.config();
  std::set<std::vector<int>> seen;
  for (auto& seq : corpus) {
    if (seen.insert(seq.ids).second) table.inputs.push_back(std::move(seq));
  }
  if (table.inputs.empty()) throw ArgumentError("importance table needs a non-empty corpus");

  std::vector<InputImportance> per_input(table.inputs.size());
  parallel_for(table.inputs.size(), options.threads, [&](std::size_t c) {
    per_input[c] = importance_all_layers(engine, table.inputs[c], options.attn_mode);
  });

  const auto n = static_cast<Eigen::Index>(table.inputs.size());
  table.values.resize(static_cast<std::size_t>(table.config.n_layers));
  for (std::size_t i = 0; i < table.values.size(); ++i) {
    for (Submodule s : kAllSubmodules) {
      const auto f = static_cast<std::size_t>(s);
      MatrixD m(n, submodule_width(table.config, s));
      for (Eigen::Index c = 0; c < n; ++c) m.row(c) = per_input[static_cast<std::size_t>(c)][i][f];
      table.values[i][f] = std::move(m);
    }
  }
  return table;
}

nlohmann::json ImportanceTable::summary() const {
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (Submodule s : kAllSubmodules) {
      const MatrixD& m = values[i][static_cast<std::size_t>(s)];
      groups.push_back({{"layer", i},
                        {"submodule", to_string(s)},
                        {"mean", m.mean()},
                        {"min", m.minCoeff()},
                        {"max", m.maxCoeff()}});
    }
  }
  return {{"language", language},
          {"attn_mode", to_string(attn_mode)},
          {"n_inputs", inputs.size()},
          {"n_layers", values.size()},
          {"groups", groups}};
}

void ImportanceTable::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json header;
  header["format_version"] = kTableFormatVersion;
  header["kind"] = "importance";
  header["language"] = language;
  header["attn_mode"] = to_string(attn_mode);
  header["config"] = nlohmann::json(config);
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& seq : inputs) ids.push_back(seq.ids);
  header["inputs"] = ids;
  std::vector<TensorView> views;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (Submodule s : kAllSubmodules) {
      const MatrixD& m = values[i][static_cast<std::size_t>(s)];
      views.push_back({table_key(static_cast<int>(i), s), "f64", {m.rows(), m.cols()},
                       std::as_bytes(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())))});
    }
  }
  write_tensor_file(path, std::move(header), views);
}

ImportanceTable ImportanceTable::load(const std::filesystem::path& path) {
  using Kind = BundleError::Kind;
  const TensorFile file = read_tensor_file(path);
  if (file.header.value("kind", "") != "importance" ||
      file.header.value("format_version", 0) != kTableFormatVersion) {
    throw BundleError(Kind::malformed_header, path.string() + " is not an importance table");
  }
  ImportanceTable table;
  try {
    table.language = file.header.at("language").get<std::string>();
    table.attn_mode = parse_attn_mode(file.header.at("attn_mode").get<std::string>());
    table.config = nlohmann::json(file.header.at("config")).get<ModelConfig>();
    for (const auto& ids : file.header.at("inputs")) {
      table.inputs.push_back({ids.get<std::vector<int>>(), std::nullopt});
    }
  } catch (const nlohmann::json::exception& e) {
    throw BundleError(Kind::malformed_header, e.what());
  }
  const auto n = static_cast<Eigen::Index>(table.inputs.size());
  table.values.resize(static_cast<std::size_t>(table.config.n_layers));
  for (std::size_t i = 0; i < table.values.size(); ++i) {
    for (Submodule s : kAllSubmodules) {
      const std::string key = table_key(static_cast<int>(i), s);
      const TensorEntry* e = file.find(key);
      if (e == nullptr) throw BundleError(Kind::malformed_header, "missing tensor " + key);
      const int width = submodule_width(table.config, s);
      if (e->shape.size() != 2 || e->shape[0] != n || e->shape[1] != width) {
        throw BundleError(Kind::shape_mismatch, key + ": shape does not match inputs x width");
      }
      const auto data = file.read_f64(*e);
      MatrixD m(n, width);
      std::memcpy(m.data(), data.data(), e->nbytes);
      table.values[i][static_cast<std::size_t>(s)] = std::move(m);
    }
  }
  return table;
}

double attention_approximation_gap(const Engine& engine, const LayerTrace& trace, int layer,
                                   double floor) {
  const auto exact = importance_attn_parallel(engine, trace, layer, AttnMode::exact);
  const auto approx = importance_attn_parallel(engine, trace, layer, AttnMode::first_order);
  double gap = 0.0;
  for (Eigen::Index j = 0; j < exact.q.size(); ++j) {
    gap = std::max(gap, std::abs(approx.q(j) - exact.q(j)) / std::max(exact.q(j), floor));
  }
  return gap;
}

}  // namespace neuronscope
