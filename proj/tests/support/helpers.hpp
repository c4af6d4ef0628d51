#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "neuronscope/model.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("neuronscope-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline neuronscope::ModelConfig small_config(int n_layers = 2, int d_model = 16, int d_inter = 32,
                                             int n_heads = 2, int d_mid = 16, int vocab = 24,
                                             int max_len = 16) {
  neuronscope::ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.d_inter = d_inter;
  c.n_heads = n_heads;
  c.d_mid = d_mid;
  c.vocab_size = vocab;
  c.max_seq_len = max_len;
  return c;
}

// Random weights with a larger spread than init_random so activations and
// attention patterns are far from trivial.
inline neuronscope::Model random_model(const neuronscope::ModelConfig& c, std::uint64_t seed,
                                       double scale = 0.3) {
  neuronscope::Model m = neuronscope::init_random(c, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& [name, t] : neuronscope::named_tensors(m.params)) {
    const bool norm = name.find("norm") != std::string::npos;
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      t->data()[i] = static_cast<float>(norm ? 1.0 + 0.2 * nd(rng) : nd(rng));
    }
  }
  return m;
}

inline neuronscope::TokenSequence random_tokens(const neuronscope::ModelConfig& c, std::size_t len,
                                                std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(neuronscope::kReservedTokens, c.vocab_size - 1);
  neuronscope::TokenSequence s;
  s.ids.push_back(neuronscope::kBosId);
  while (s.ids.size() < len) s.ids.push_back(d(rng));
  return s;
}

inline double rel_err(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace testing_support
