#include "neuronscope/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "neuronscope/errors.hpp"

namespace neuronscope {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// dx for y = x * r * g (r = 1/rms(x) per row); accumulates into dgain.
MatrixD rms_norm_backward(const MatrixD& x, const VectorD& rinv, const MatrixD& gain,
                          const MatrixD& dy, MatrixD& dgain) {
  const double d = static_cast<double>(x.cols());
  MatrixD dx(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double r = rinv(t);
    dgain.array() += (dy.row(t).array() * x.row(t).array() * r);
    const RowVectorD gy = dy.row(t).cwiseProduct(gain.row(0));
    const double dot = gy.dot(x.row(t));
    dx.row(t) = r * gy - x.row(t) * (r * r * r * dot / d);
  }
  return dx;
}

void attention_forward(const ModelConfig& config, const LayerParams<double>& layer,
                       LayerCache& c, std::vector<MatrixD>* scores_out) {
  const int dh = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index l = c.attn_in.rows();
  c.q = c.attn_in * layer.wq;
  c.k = c.attn_in * layer.wk;
  c.v = c.attn_in * layer.wv;
  c.attn_mix = MatrixD::Zero(l, config.d_mid);
  c.probs.resize(config.n_heads);
  if (scores_out) scores_out->resize(config.n_heads);
  for (int h = 0; h < config.n_heads; ++h) {
    MatrixD scores = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index t = 0; t < l; ++t) {
      for (Eigen::Index s = t + 1; s < l; ++s) scores(t, s) = kNegInf;
    }
    c.probs[h] = causal_softmax(scores);
    c.attn_mix.middleCols(h * dh, dh) = c.probs[h] * c.v.middleCols(h * dh, dh);
    if (scores_out) (*scores_out)[h] = std::move(scores);
  }
  c.attn_out = c.attn_mix * layer.wo;
}

}  // namespace

double silu(double x) { return x * sigmoid(x); }

MatrixD rms_norm(const MatrixD& x, const MatrixD& gain, VectorD* rinv_out) {
  MatrixD y(x.rows(), x.cols());
  VectorD rinv(x.rows());
  const double d = static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double r = 1.0 / std::sqrt(x.row(t).squaredNorm() / d + kRmsEps);
    rinv(t) = r;
    y.row(t) = (x.row(t) * r).cwiseProduct(gain.row(0));
  }
  if (rinv_out) *rinv_out = std::move(rinv);
  return y;
}

MatrixD causal_softmax(const MatrixD& scores) {
  MatrixD p = MatrixD::Zero(scores.rows(), scores.cols());
  for (Eigen::Index t = 0; t < scores.rows(); ++t) {
    const Eigen::Index n = std::min<Eigen::Index>(t + 1, scores.cols());
    const double mx = scores.row(t).head(n).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index s = 0; s < n; ++s) {
      p(t, s) = std::exp(scores(t, s) - mx);
      sum += p(t, s);
    }
    p.row(t).head(n) /= sum;
  }
  return p;
}

MatrixD block_forward(const ModelConfig& config, const LayerParams<double>& layer,
                      const MatrixD& h, LayerCache* cache, std::vector<MatrixD>* scores_out) {
  LayerCache local;
  LayerCache& c = cache ? *cache : local;
  c.input = h;
  c.attn_in = rms_norm(h, layer.attn_norm, &c.attn_rinv);
  attention_forward(config, layer, c, scores_out);
  c.mid = h + c.attn_out;
  c.ffn_in = rms_norm(c.mid, layer.ffn_norm, &c.ffn_rinv);
  c.gate = c.ffn_in * layer.w_gate;
  c.up = c.ffn_in * layer.w_up;
  c.hffn = c.gate.unaryExpr([](double g) { return silu(g); }).cwiseProduct(c.up);
  c.ffn_out = c.hffn * layer.w_down;
  return c.mid + c.ffn_out;
}

Engine::Engine(const Model& model)
    : config_(model.config), params_(cast_params<double>(model.params)) {
  config_.validate();
}

Engine::Engine(ModelConfig config, Params<double> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
}

LayerTrace Engine::forward(const TokenSequence& tokens) const {
  check_tokens(tokens, config_);
  const auto l = static_cast<Eigen::Index>(tokens.size());
  if (l > config_.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(l) + " tokens exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  LayerTrace trace;
  trace.ids = tokens.ids;
  MatrixD h(l, config_.d_model);
  for (Eigen::Index t = 0; t < l; ++t) {
    h.row(t) = params_.token_embedding.row(tokens.ids[t]) + params_.position_embedding.row(t);
  }
  trace.hidden_states.reserve(config_.n_layers + 1);
  trace.hidden_states.push_back(h);
  trace.layers.resize(config_.n_layers);
  trace.attention_scores.resize(config_.n_layers);
  for (int i = 0; i < config_.n_layers; ++i) {
    h = block_forward(config_, params_.layers[i], h, &trace.layers[i], &trace.attention_scores[i]);
    trace.ffn_activations.push_back(trace.layers[i].hffn);
    trace.hidden_states.push_back(h);
  }
  trace.final_normed = rms_norm(h, params_.final_norm, &trace.final_rinv);
  trace.logits = trace.final_normed * params_.token_embedding.transpose();
  return trace;
}

MatrixD Engine::project(const MatrixD& hidden, bool apply_final_norm) const {
  if (!apply_final_norm) return hidden * params_.token_embedding.transpose();
  return rms_norm(hidden, params_.final_norm) * params_.token_embedding.transpose();
}

void Engine::backward(const LayerTrace& trace, const MatrixD& dlogits,
                      Params<double>& grads) const {
  const int dh = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  grads.token_embedding.noalias() += dlogits.transpose() * trace.final_normed;
  MatrixD dnormed = dlogits * params_.token_embedding;
  MatrixD dh_out = rms_norm_backward(trace.hidden_states.back(), trace.final_rinv,
                                     params_.final_norm, dnormed, grads.final_norm);

  for (int i = config_.n_layers - 1; i >= 0; --i) {
    const LayerCache& c = trace.layers[i];
    const LayerParams<double>& w = params_.layers[i];
    LayerParams<double>& g = grads.layers[i];

    // FFN branch
    g.w_down.noalias() += c.hffn.transpose() * dh_out;
    const MatrixD dhffn = dh_out * w.w_down.transpose();
    MatrixD dgate(c.gate.rows(), c.gate.cols());
    MatrixD dup(c.up.rows(), c.up.cols());
    for (Eigen::Index r = 0; r < c.gate.rows(); ++r) {
      for (Eigen::Index k = 0; k < c.gate.cols(); ++k) {
        const double x = c.gate(r, k);
        const double sg = sigmoid(x);
        dup(r, k) = dhffn(r, k) * x * sg;
        dgate(r, k) = dhffn(r, k) * c.up(r, k) * sg * (1.0 + x * (1.0 - sg));
      }
    }
    g.w_gate.noalias() += c.ffn_in.transpose() * dgate;
    g.w_up.noalias() += c.ffn_in.transpose() * dup;
    const MatrixD dffn_in = dgate * w.w_gate.transpose() + dup * w.w_up.transpose();
    const MatrixD dmid =
        dh_out + rms_norm_backward(c.mid, c.ffn_rinv, w.ffn_norm, dffn_in, g.ffn_norm);

    // Attention branch
    g.wo.noalias() += c.attn_mix.transpose() * dmid;
    const MatrixD dmix = dmid * w.wo.transpose();
    MatrixD dq = MatrixD::Zero(c.q.rows(), c.q.cols());
    MatrixD dk = MatrixD::Zero(c.k.rows(), c.k.cols());
    MatrixD dv = MatrixD::Zero(c.v.rows(), c.v.cols());
    for (int h = 0; h < config_.n_heads; ++h) {
      const MatrixD& p = c.probs[h];
      const auto dmix_h = dmix.middleCols(h * dh, dh);
      const MatrixD dp = dmix_h * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * dmix_h;
      MatrixD ds = p.cwiseProduct(dp);
      const VectorD row_dot = ds.rowwise().sum();
      ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
      ds *= scale;
      dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    g.wq.noalias() += c.attn_in.transpose() * dq;
    g.wk.noalias() += c.attn_in.transpose() * dk;
    g.wv.noalias() += c.attn_in.transpose() * dv;
    const MatrixD dattn_in =
        dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
    dh_out = dmid + rms_norm_backward(c.input, c.attn_rinv, w.attn_norm, dattn_in, g.attn_norm);
  }

  for (std::size_t t = 0; t < trace.ids.size(); ++t) {
    grads.token_embedding.row(trace.ids[t]) += dh_out.row(static_cast<Eigen::Index>(t));
    grads.position_embedding.row(static_cast<Eigen::Index>(t)) +=
        dh_out.row(static_cast<Eigen::Index>(t));
  }
}

LayerTrace forward(const Model& model, const TokenSequence& tokens) {
  return Engine(model).forward(tokens);
}

MatrixD log_softmax_rows(const MatrixD& logits) {
  MatrixD out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double mx = logits.row(t).maxCoeff();
    const double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
    out.row(t) = logits.row(t).array() - lse;
  }
  return out;
}

std::vector<double> logprobs(const Engine& engine, const TokenSequence& tokens) {
  if (tokens.size() < 2) {
    throw LengthError("logprobs needs at least 2 tokens (the first has no context)");
  }
  const LayerTrace trace = engine.forward(tokens);
  const MatrixD lp = log_softmax_rows(trace.logits);
  std::vector<double> out(tokens.size() - 1);
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    out[t - 1] = lp(static_cast<Eigen::Index>(t - 1), tokens.ids[t]);
  }
  return out;
}

std::vector<double> logprobs(const Model& model, const TokenSequence& tokens) {
  return logprobs(Engine(model), tokens);
}

int sample_categorical(const RowVectorD& logits, double temperature, double u) {
  Eigen::Index best = 0;
  if (temperature <= 0.0) {
    logits.maxCoeff(&best);
    return static_cast<int>(best);
  }
  const double mx = logits.maxCoeff();
  const RowVectorD w = ((logits.array() - mx) / temperature).exp().matrix();
  const double target = u * w.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    acc += w(i);
    if (target < acc) return static_cast<int>(i);
  }
  // u * sum can round to sum exactly; fall back to the last non-zero weight.
  for (Eigen::Index i = w.size() - 1; i >= 0; --i) {
    if (w(i) > 0.0) return static_cast<int>(i);
  }
  return 0;
}

TokenSequence sample(const Engine& engine, const TokenSequence& prompt,
                     const DecodeConfig& decode) {
  const auto& cfg = engine.config();
  check_tokens(prompt, cfg);
  if (static_cast<int>(prompt.size()) > cfg.max_seq_len) {
    throw LengthError("prompt exceeds max_seq_len");
  }
  std::mt19937_64 rng(decode.seed);
  TokenSequence out{prompt.ids, std::nullopt};
  for (int step = 0; step < decode.max_new_tokens; ++step) {
    if (static_cast<int>(out.size()) >= cfg.max_seq_len) break;
    const LayerTrace trace = engine.forward(out);
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const int next = sample_categorical(trace.logits.row(trace.logits.rows() - 1),
                                        decode.temperature, u);
    out.ids.push_back(next);
    if (decode.stop_at_eos && next == kEosId) break;
  }
  return out;
}

TokenSequence sample(const Model& model, const TokenSequence& prompt, const DecodeConfig& decode) {
  return sample(Engine(model), prompt, decode);
}

}  // namespace neuronscope
