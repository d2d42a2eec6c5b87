#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace evrb {

// Index into the vocabulary Φ. Valid ids satisfy 0 <= id < vocab.size().
using TokenId = std::int32_t;

// The discrete symbol space: an ordered token list plus the designated
// EOS token, the punctuation subset, and the toy world's object-word subset.
struct Vocabulary {
  std::vector<std::string> tokens;
  TokenId eos_id = 0;
  std::set<TokenId> punctuation_ids;
  std::set<TokenId> object_word_ids;

  int size() const { return static_cast<int>(tokens.size()); }
  bool valid(TokenId id) const { return id >= 0 && id < size(); }
  const std::string& word(TokenId id) const;

  // Returns -1 if the word is not in the vocabulary.
  TokenId id_of(const std::string& word) const;

  bool is_punctuation(TokenId id) const { return punctuation_ids.count(id) > 0; }
  bool is_object_word(TokenId id) const { return object_word_ids.count(id) > 0; }

  // Throws std::invalid_argument if token strings are not unique or any
  // designated id is out of range.
  void validate() const;
};

// The fixed 64-token toy vocabulary: EOS, punctuation {".", ","}, 24 object
// words, yes/no, instruction words, a background symbol, and filler words.
Vocabulary default_vocabulary();

}  // namespace evrb
