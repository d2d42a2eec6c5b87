#include "evrb/vocab.hpp"

#include <stdexcept>
#include <unordered_set>

namespace evrb {

const std::string& Vocabulary::word(TokenId id) const {
  if (!valid(id)) throw std::invalid_argument("Vocabulary::word: token id out of range");
  return tokens[static_cast<size_t>(id)];
}

TokenId Vocabulary::id_of(const std::string& w) const {
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == w) return static_cast<TokenId>(i);
  }
  return -1;
}

void Vocabulary::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& t : tokens) {
    if (!seen.insert(t).second) {
      throw std::invalid_argument("Vocabulary: duplicate token string '" + t + "'");
    }
  }
  if (!valid(eos_id)) throw std::invalid_argument("Vocabulary: eos_id out of range");
  for (TokenId id : punctuation_ids) {
    if (!valid(id)) throw std::invalid_argument("Vocabulary: punctuation id out of range");
  }
  for (TokenId id : object_word_ids) {
    if (!valid(id)) throw std::invalid_argument("Vocabulary: object word id out of range");
  }
}

Vocabulary default_vocabulary() {
  Vocabulary v;
  // Layout: 0 eos, 1-2 punctuation, 3-26 object words, 27-28 yes/no,
  // 29-42 instruction/probe words + background symbol, 43-63 fillers.
  v.tokens = {
      "<eos>", ".", ",",
      // 24 object words
      "cat", "dog", "bottle", "chair", "table", "bird", "car", "tree",
      "cup", "book", "phone", "lamp", "fish", "horse", "clock", "plant",
      "shoe", "ball", "door", "window", "spoon", "bowl", "hat", "key",
      // probe answers
      "yes", "no",
      // instruction and probe words
      "is", "there", "a", "in", "the", "image", "please", "help", "me",
      "describe", "detail", "?", "<sys>", "<bg>",
      // fillers
      "and", "with", "near", "on", "under", "over", "very", "some",
      "many", "small", "large", "red", "blue", "green", "old", "new",
      "nice", "dark", "light", "round", "flat",
  };
  v.eos_id = 0;
  v.punctuation_ids = {1, 2};
  for (TokenId id = 3; id <= 26; ++id) v.object_word_ids.insert(id);
  v.validate();
  return v;
}

}  // namespace evrb
