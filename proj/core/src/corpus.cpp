#include "neuronscope/corpus.hpp"

#include <fstream>

#include "neuronscope/errors.hpp"
#include "neuronscope/vocabulary.hpp"

namespace neuronscope {

void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const nlohmann::json&, std::size_t)>& fn) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(std::string("malformed JSON: ") + e.what(), number);
    }
    if (!obj.is_object()) throw DataError("expected a JSON object", number);
    fn(obj, number);
  }
}

TokenSequence tokens_from_json(const nlohmann::json& value, const Vocabulary* vocab,
                               std::size_t line, const std::string& field) {
  if (value.is_string()) {
    if (vocab == nullptr) {
      throw DataError("field '" + field + "' is text but no vocabulary was supplied", line, field);
    }
    return vocab->encode(value.get<std::string>());
  }
  if (value.is_array()) {
    TokenSequence seq;
    for (const auto& v : value) {
      if (!v.is_number_integer()) {
        throw DataError("field '" + field + "' must hold integer token ids", line, field);
      }
      seq.ids.push_back(v.get<int>());
    }
    return seq;
  }
  throw DataError("field '" + field + "' must be a string or an array of token ids", line, field);
}

std::vector<TokenSequence> load_token_corpus(const std::filesystem::path& path,
                                             const Vocabulary* vocab, bool prepend_bos) {
  std::vector<TokenSequence> out;
  for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line) {
    TokenSequence seq;
    if (obj.contains("ids")) {
      seq = tokens_from_json(obj["ids"], vocab, line, "ids");
    } else if (obj.contains("text")) {
      seq = tokens_from_json(obj["text"], vocab, line, "text");
    } else {
      throw DataError("missing field 'text' (or 'ids')", line, "text");
    }
    if (prepend_bos) seq.ids.insert(seq.ids.begin(), kBosId);
    if (seq.ids.empty()) throw DataError("empty token sequence", line);
    out.push_back(std::move(seq));
  });
  return out;
}

}  // namespace neuronscope
