#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace neuronscope {

// Invalid UTF-8 bytes decode to U+FFFD one byte at a time.
std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);

bool is_hangul(char32_t c);
bool is_ascii_letter(char32_t c);
bool is_space(char32_t c);
bool is_ascii_punct(char32_t c);

enum class Language { korean, english, other };

const char* to_string(Language lang);

// Character-majority vote: Hangul characters count for korean, ASCII letters
// for english; ties and letterless text are other.
Language classify_token_language(std::string_view text);

// Half-open code point span [begin, end) into the decoded text.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const Span&) const = default;
};

// Whitespace/punctuation splitter: ASCII punctuation marks and Hangul
// characters become single-character pieces; other non-space runs stay whole.
std::vector<Span> split_pieces(std::u32string_view text);

// Word-level split used for language tallies: whitespace and ASCII punctuation
// separate words, a word keeps its Hangul and Latin characters together.
std::vector<Span> split_words(std::u32string_view text);

std::string trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);

}  // namespace neuronscope
