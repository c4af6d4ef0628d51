#include "neuronscope/vocabulary.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "neuronscope/errors.hpp"
#include "neuronscope/text.hpp"

namespace neuronscope {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < static_cast<std::size_t>(kReservedTokens)) {
    throw DataError("vocabulary needs at least 4 entries (pad, bos, eos, unk)");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate vocabulary entry '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return Vocabulary(j.get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("vocabulary must be a JSON array of strings: " + std::string(e.what()));
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  out << nlohmann::json(tokens_).dump() << '\n';
}

int Vocabulary::id(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view piece) const {
  return index_.count(std::string(piece)) != 0;
}

TokenSequence Vocabulary::encode(std::string_view text, bool prepend_bos) const {
  TokenSequence seq;
  seq.source_text = std::string(text);
  if (prepend_bos) seq.ids.push_back(kBosId);
  const std::u32string cps = utf8_decode(text);
  for (const Span& s : split_pieces(cps)) {
    seq.ids.push_back(id(utf8_encode(std::u32string_view(cps).substr(s.begin, s.end - s.begin))));
  }
  return seq;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    if (id < 0 || id >= size()) continue;
    if (!out.empty()) out.push_back(' ');
    out += tokens_[static_cast<std::size_t>(id)];
  }
  return out;
}

}  // namespace neuronscope
