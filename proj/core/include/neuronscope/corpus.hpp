#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuronscope/model.hpp"

namespace neuronscope {

class Vocabulary;

// Calls fn(object, line_number) for every non-blank line. Parse failures and
// non-object lines throw DataError with the 1-based line number.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const nlohmann::json&, std::size_t)>& fn);

// A JSON string (tokenized with vocab, which must then be non-null) or an
// array of token ids.
TokenSequence tokens_from_json(const nlohmann::json& value, const Vocabulary* vocab,
                               std::size_t line, const std::string& field);

// Plain token corpus: one {"text": ...} or {"ids": [...]} object per line.
std::vector<TokenSequence> load_token_corpus(const std::filesystem::path& path,
                                             const Vocabulary* vocab, bool prepend_bos = false);

}  // namespace neuronscope
