#include "neuronscope/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "neuronscope/errors.hpp"
#include "neuronscope/tensor_file.hpp"

namespace neuronscope {

namespace {

constexpr int kFormatVersion = 1;

void require_positive(int v, const char* name) {
  if (v < 1) throw ConfigError(std::string(name) + " must be >= 1, got " + std::to_string(v));
}

template <typename T>
std::span<const std::byte> bytes_of(const Matrix<T>& m) {
  return std::as_bytes(std::span<const T>(m.data(), static_cast<std::size_t>(m.size())));
}

}  // namespace

void ModelConfig::validate() const {
  require_positive(n_layers, "n_layers");
  require_positive(d_model, "d_model");
  require_positive(d_inter, "d_inter");
  require_positive(n_heads, "n_heads");
  require_positive(d_mid, "d_mid");
  require_positive(max_seq_len, "max_seq_len");
  if (vocab_size < kReservedTokens) {
    throw ConfigError("vocab_size must be >= 4 (pad/bos/eos/unk are reserved), got " +
                      std::to_string(vocab_size));
  }
  if (d_mid % n_heads != 0) {
    throw ConfigError("d_mid (" + std::to_string(d_mid) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"d_inter", c.d_inter},
       {"n_heads", c.n_heads},   {"d_mid", c.d_mid},             {"vocab_size", c.vocab_size},
       {"max_seq_len", c.max_seq_len}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("d_inter").get_to(c.d_inter);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_mid").get_to(c.d_mid);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

std::vector<std::pair<std::string, std::pair<int, int>>> tensor_shapes(const ModelConfig& c) {
  auto proto = zeros_like<float>(c);
  std::vector<std::pair<std::string, std::pair<int, int>>> out;
  for (const auto& [name, m] : named_tensors(proto)) {
    out.emplace_back(name, std::pair{static_cast<int>(m->rows()), static_cast<int>(m->cols())});
  }
  return out;
}

void Model::validate() const {
  config.validate();
  const auto expected = tensor_shapes(config);
  const auto actual = named_tensors(params);
  if (expected.size() != actual.size()) throw ConfigError("parameter count does not match config");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, shape] = expected[i];
    const auto* m = actual[i].second;
    if (m->rows() != shape.first || m->cols() != shape.second) {
      throw ConfigError(name + ": shape does not match config");
    }
    if (!m->allFinite()) throw ConfigError(name + ": contains NaN or Inf");
  }
}

bool bit_identical(const Params<float>& a, const Params<float>& b) {
  const auto ta = named_tensors(a);
  const auto tb = named_tensors(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const auto& x = *ta[i].second;
    const auto& y = *tb[i].second;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(float) * x.size()) != 0) return false;
  }
  return true;
}

bool Model::operator==(const Model& other) const {
  return config == other.config && bit_identical(params, other.params);
}

Model init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m{config, zeros_like<float>(config)};
  std::mt19937_64 rng(seed);
  constexpr double kStd = 0.02;
  const double out_std = kStd / std::sqrt(2.0 * config.n_layers);
  auto fill = [&rng](MatrixF& w, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(dist(rng));
  };
  fill(m.params.token_embedding, kStd);
  fill(m.params.position_embedding, kStd);
  for (auto& l : m.params.layers) {
    l.attn_norm.setOnes();
    fill(l.wq, kStd);
    fill(l.wk, kStd);
    fill(l.wv, kStd);
    fill(l.wo, out_std);
    l.ffn_norm.setOnes();
    fill(l.w_gate, kStd);
    fill(l.w_up, kStd);
    fill(l.w_down, out_std);
  }
  m.params.final_norm.setOnes();
  return m;
}

void check_tokens(const TokenSequence& tokens, const ModelConfig& config) {
  if (tokens.ids.empty()) throw ArgumentError("token sequence is empty");
  for (int id : tokens.ids) {
    if (id < 0 || id >= config.vocab_size) {
      throw ArgumentError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(config.vocab_size));
    }
  }
}

void save_bundle(const Model& model, const std::filesystem::path& path) {
  model.validate();
  nlohmann::ordered_json header;
  header["format_version"] = kFormatVersion;
  header["kind"] = "model";
  header["config"] = nlohmann::json(model.config);
  std::vector<TensorView> views;
  for (const auto& [name, m] : named_tensors(model.params)) {
    views.push_back({name, "f32", {m->rows(), m->cols()}, bytes_of(*m)});
  }
  write_tensor_file(path, std::move(header), views);
}

Model load_bundle(const std::filesystem::path& path) {
  using Kind = BundleError::Kind;
  const TensorFile file = read_tensor_file(path);
  if (file.header.value("format_version", 0) != kFormatVersion) {
    throw BundleError(Kind::malformed_header, "unsupported bundle format_version");
  }
  if (!file.header.contains("config")) throw BundleError(Kind::malformed_header, "missing config");
  Model m;
  try {
    m.config = nlohmann::json(file.header["config"]).get<ModelConfig>();
    m.config.validate();
  } catch (const ConfigError& e) {
    throw BundleError(Kind::malformed_header, e.what());
  }
  m.params = zeros_like<float>(m.config);
  for (auto& [name, dst] : named_tensors(m.params)) {
    const TensorEntry* e = file.find(name);
    if (e == nullptr) throw BundleError(Kind::malformed_header, "missing tensor " + name);
    if (e->shape.size() != 2 || e->shape[0] != dst->rows() || e->shape[1] != dst->cols()) {
      throw BundleError(Kind::shape_mismatch, name + ": shape in directory does not match config");
    }
    const auto values = file.read_f32(*e);
    std::memcpy(dst->data(), values.data(), e->nbytes);
  }
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw BundleError(Kind::malformed_header, e.what());
  }
  return m;
}

}  // namespace neuronscope
