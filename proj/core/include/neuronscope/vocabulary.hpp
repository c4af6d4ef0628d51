#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "neuronscope/model.hpp"

namespace neuronscope {

// Token strings indexed by id. Ids 0..3 are pad/bos/eos/unk whatever their
// spelling in the file. Unknown pieces map to unk.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  // JSON array of token strings, index = id. Throws DataError.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int id(std::string_view piece) const;
  bool contains(std::string_view piece) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSequence encode(std::string_view text, bool prepend_bos = false) const;
  // Joins non-special tokens with single spaces.
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace neuronscope
