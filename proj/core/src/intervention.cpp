#include "neuronscope/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "neuronscope/errors.hpp"
#include "neuronscope/parallel.hpp"

namespace neuronscope {

namespace {

// Tensor positions inside named_tensors() for layer i.
struct LayerSlots {
  std::size_t wq, wk, wv, w_gate, w_up, w_down;
};

LayerSlots slots_for(std::size_t layer) {
  const std::size_t base = 2 + layer * 9;
  return {base + 1, base + 2, base + 3, base + 6, base + 7, base + 8};
}

void add_column(std::vector<std::size_t>& entries, int rows, int cols, int col) {
  for (int r = 0; r < rows; ++r) entries.push_back(static_cast<std::size_t>(r * cols + col));
}

void add_row(std::vector<std::size_t>& entries, int cols, int row) {
  for (int c = 0; c < cols; ++c) entries.push_back(static_cast<std::size_t>(row * cols + c));
}

}  // namespace

InterventionMask::InterventionMask(const ModelConfig& config, const std::vector<NeuronId>& neurons) {
  config.validate();
  std::set<NeuronId> seen;
  for (const auto& n : neurons) {
    check_neuron(n, config);
    if (!seen.insert(n).second) {
      throw ArgumentError("duplicate neuron in set: layer " + std::to_string(n.layer) + " " +
                          to_string(n.submodule) + " " + std::to_string(n.index));
    }
  }
  entries_.resize(tensor_shapes(config).size());
  layers_.resize(static_cast<std::size_t>(config.n_layers));
  for (const auto& n : seen) {
    const auto slots = slots_for(static_cast<std::size_t>(n.layer));
    auto& li = layers_[static_cast<std::size_t>(n.layer)];
    switch (n.submodule) {
      case Submodule::attn_q:
        li.q_cols.push_back(n.index);
        add_column(entries_[slots.wq], config.d_model, config.d_mid, n.index);
        break;
      case Submodule::attn_k:
        li.k_cols.push_back(n.index);
        add_column(entries_[slots.wk], config.d_model, config.d_mid, n.index);
        break;
      case Submodule::attn_v:
        li.v_cols.push_back(n.index);
        add_column(entries_[slots.wv], config.d_model, config.d_mid, n.index);
        break;
      case Submodule::ffn_up:
        li.gate_up_cols.push_back(n.index);
        add_column(entries_[slots.w_gate], config.d_model, config.d_inter, n.index);
        add_column(entries_[slots.w_up], config.d_model, config.d_inter, n.index);
        break;
      case Submodule::ffn_down:
        li.down_rows.push_back(n.index);
        add_row(entries_[slots.w_down], config.d_model, n.index);
        break;
    }
  }
  for (auto& e : entries_) std::sort(e.begin(), e.end());
}

InterventionMask InterventionMask::all(const ModelConfig& config) {
  config.validate();
  InterventionMask mask;
  for (const auto& [name, shape] : tensor_shapes(config)) {
    std::vector<std::size_t> e(static_cast<std::size_t>(shape.first) *
                               static_cast<std::size_t>(shape.second));
    std::iota(e.begin(), e.end(), std::size_t{0});
    mask.entries_.push_back(std::move(e));
  }
  mask.layers_.resize(static_cast<std::size_t>(config.n_layers));
  return mask;
}

std::size_t InterventionMask::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.size();
  return n;
}

bool InterventionMask::covers(std::size_t tensor, std::size_t flat) const {
  const auto& e = entries_.at(tensor);
  return std::binary_search(e.begin(), e.end(), flat);
}

Model deactivate(const Model& model, const std::vector<NeuronId>& neurons) {
  Model out = model;
  for (const auto& n : neurons) {
    check_neuron(n, model.config);
    zero_neuron(out.params.layers[static_cast<std::size_t>(n.layer)], n.submodule, n.index);
  }
  return out;
}

Model deactivate(const Model& model, const NeuronSet& neurons) {
  return deactivate(model, neurons.neurons);
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be finite and >= 0");
  }
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw ConfigError("adam hyperparameters out of range");
  }
  if (early_stop_patience < 0 || eval_every < 1) throw ConfigError("bad early-stop settings");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate},
          {"steps", cfg.steps},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"optimizer", cfg.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"adam_eps", cfg.adam_eps},
          {"early_stop_patience", cfg.early_stop_patience},
          {"eval_every", cfg.eval_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    const std::string opt = j.value("optimizer", std::string("adam"));
    if (opt == "adam") {
      cfg.optimizer = OptimizerKind::adam;
    } else if (opt == "sgd") {
      cfg.optimizer = OptimizerKind::sgd;
    } else {
      throw ConfigError("optimizer must be adam or sgd");
    }
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    cfg.early_stop_patience = j.value("early_stop_patience", cfg.early_stop_patience);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

MaskedOptimizer::MaskedOptimizer(const TrainConfig& cfg, const InterventionMask& mask)
    : kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      mask_(mask) {
  if (kind_ == OptimizerKind::adam) {
    for (const auto& e : mask.entries()) {
      m_.emplace_back(e.size(), 0.0);
      v_.emplace_back(e.size(), 0.0);
    }
  }
}

void MaskedOptimizer::step(Params<float>& params, const Params<double>& grads) {
  ++t_;
  auto ptensors = named_tensors(params);
  const auto gtensors = named_tensors(grads);
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t t = 0; t < ptensors.size(); ++t) {
    const auto& entries = mask_.entries()[t];
    float* w = ptensors[t].second->data();
    const double* g = gtensors[t].second->data();
    for (std::size_t j = 0; j < entries.size(); ++j) {
      const std::size_t idx = entries[j];
      double update = 0.0;
      if (kind_ == OptimizerKind::adam) {
        double& m = m_[t][j];
        double& v = v_[t][j];
        m = beta1_ * m + (1.0 - beta1_) * g[idx];
        v = beta2_ * v + (1.0 - beta2_) * g[idx] * g[idx];
        update = lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
      } else {
        update = lr_ * g[idx];
      }
      if (update != 0.0) w[idx] = static_cast<float>(static_cast<double>(w[idx]) - update);
    }
  }
}

double sequence_nll(const Engine& engine, const TokenSequence& seq) {
  double total = 0.0;
  for (double lp : logprobs(engine, seq)) total -= lp;
  return total;
}

double sequence_nll_gradient(const Engine& engine, const TokenSequence& seq, double weight,
                             Params<double>& grads) {
  if (seq.size() < 2) throw LengthError("training sequences need at least 2 tokens");
  const LayerTrace trace = engine.forward(seq);
  const MatrixD lp = log_softmax_rows(trace.logits);
  MatrixD dlogits = MatrixD::Zero(lp.rows(), lp.cols());
  double nll = 0.0;
  for (Eigen::Index t = 0; t + 1 < lp.rows(); ++t) {
    const int target = seq.ids[static_cast<std::size_t>(t + 1)];
    nll -= lp(t, target);
    dlogits.row(t) = lp.row(t).array().exp() * weight;
    dlogits(t, target) -= weight;
  }
  engine.backward(trace, dlogits, grads);
  return nll;
}

void apply_mask(Params<double>& grads, const InterventionMask& mask) {
  auto tensors = named_tensors(grads);
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& entries = mask.entries()[t];
    MatrixD& g = *tensors[t].second;
    if (entries.size() == static_cast<std::size_t>(g.size())) continue;
    MatrixD kept = MatrixD::Zero(g.rows(), g.cols());
    for (std::size_t idx : entries) kept.data()[idx] = g.data()[idx];
    g = std::move(kept);
  }
}

namespace {

double mean_token_nll(const Engine& engine, const std::vector<TokenSequence>& data) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : data) {
    total += sequence_nll(engine, s);
    tokens += s.size() - 1;
  }
  return total / static_cast<double>(tokens);
}

}  // namespace

TrainResult train_masked(const Model& model, const InterventionMask& mask,
                         const std::vector<TokenSequence>& dataset, const TrainConfig& cfg,
                         const std::vector<TokenSequence>* holdout, int threads) {
  cfg.validate();
  if (dataset.empty()) throw ArgumentError("training dataset is empty");
  for (const auto& s : dataset) {
    check_tokens(s, model.config);
    if (s.size() < 2) throw LengthError("training sequences need at least 2 tokens");
  }
  TrainResult result{model, {}, {}, 0};
  MaskedOptimizer opt(cfg, mask);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  double best_holdout = std::numeric_limits<double>::infinity();
  Params<float> best_params;
  int stale = 0;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::size_t tokens = 0;
    for (auto i : batch) tokens += dataset[i].size() - 1;
    const double weight = 1.0 / static_cast<double>(tokens);

    const Engine engine(result.model);
    std::vector<Params<double>> partial(batch.size());
    std::vector<double> nll(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t b) {
      partial[b] = zeros_like<double>(model.config);
      nll[b] = sequence_nll_gradient(engine, dataset[batch[b]], weight, partial[b]);
    });
    Params<double> grads = zeros_like<double>(model.config);
    double loss = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      loss += nll[b] * weight;
      auto dst = named_tensors(grads);
      const auto src = named_tensors(partial[b]);
      for (std::size_t t = 0; t < dst.size(); ++t) *dst[t].second += *src[t].second;
    }
    if (!std::isfinite(loss)) {
      std::string ids;
      for (auto i : batch) ids += (ids.empty() ? "" : ",") + std::to_string(i);
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (batch [" + ids +
                         "])");
    }
    result.loss_curve.push_back(loss);
    apply_mask(grads, mask);
    opt.step(result.model.params, grads);
    result.steps_run = step + 1;

    if (holdout != nullptr && cfg.early_stop_patience > 0 && (step + 1) % cfg.eval_every == 0) {
      const double h = mean_token_nll(Engine(result.model), *holdout);
      result.holdout_curve.push_back(h);
      if (h < best_holdout) {
        best_holdout = h;
        best_params = result.model.params;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        result.model.params = best_params;
        break;
      }
    }
  }
  return result;
}

TrainResult tune_neurons(const Model& model, const NeuronSet& neurons,
                         const std::vector<TokenSequence>& dataset, const TrainConfig& cfg,
                         int threads) {
  const InterventionMask mask(model.config, neurons);
  return train_masked(model, mask, dataset, cfg, nullptr, threads);
}

nlohmann::json provenance_json(const NeuronSet& neurons, const TrainConfig& cfg,
                               const TrainResult& result) {
  return {{"neuron_set", neurons.to_json()},
          {"train_config", to_json(cfg)},
          {"loss_curve", result.loss_curve},
          {"steps_run", result.steps_run},
          {"seed", cfg.seed}};
}

Params<double> masked_gradient(const Model& model, const InterventionMask& mask,
                               const TokenSequence& sample) {
  Params<double> grads = zeros_like<double>(model.config);
  sequence_nll_gradient(Engine(model), sample, 1.0, grads);
  apply_mask(grads, mask);
  return grads;
}

GradCheckResult grad_check(const Model& model, const NeuronSet& neurons,
                           const TokenSequence& sample, std::uint64_t seed,
                           std::size_t max_entries, double step, double abs_floor) {
  if (neurons.empty()) throw ArgumentError("gradient check needs at least one neuron");
  const InterventionMask mask(model.config, neurons);
  const Params<double> grads = masked_gradient(model, mask, sample);
  const auto gt = named_tensors(grads);

  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t t = 0; t < mask.entries().size(); ++t) {
    for (std::size_t idx : mask.entries()[t]) pool.emplace_back(t, idx);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  if (pool.size() > max_entries) pool.resize(max_entries);

  GradCheckResult result;
  Model probe = model;
  auto pt = named_tensors(probe.params);
  for (const auto& [t, idx] : pool) {
    float& w = pt[t].second->data()[idx];
    const float original = w;
    const float plus = static_cast<float>(static_cast<double>(original) + step);
    const float minus = static_cast<float>(static_cast<double>(original) - step);
    w = plus;
    const double loss_plus = sequence_nll(Engine(probe), sample);
    w = minus;
    const double loss_minus = sequence_nll(Engine(probe), sample);
    w = original;
    // Divide by the step actually taken after rounding to f32.
    const double numeric =
        (loss_plus - loss_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
    const double analytic = gt[t].second->data()[idx];
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double rel = scale < abs_floor ? 0.0 : std::abs(analytic - numeric) / scale;
    result.entries.push_back({gt[t].first, idx, analytic, numeric, rel});
    result.max_rel_error = std::max(result.max_rel_error, rel);
  }
  return result;
}

}  // namespace neuronscope
