#include "fuselm/tokenizer.hpp"

#include "fuselm/error.hpp"

namespace fuselm {

namespace {
// Space and newline first, then the printable core. Covers every character
// the built-in prompt templates and corpus generators emit, plus enough
// punctuation for free-form prompts.
constexpr char kAlphabet[] =
    " \n"
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    ".,:;!?'\"()[]{}<>+-*/=_#&@%$^|~\\`";
}  // namespace

Tokenizer::Tokenizer() : alphabet_(kAlphabet) {
  char_to_id_.fill(-1);
  for (size_t i = 0; i < alphabet_.size(); ++i) {
    char_to_id_[static_cast<unsigned char>(alphabet_[i])] = static_cast<int>(i) + 2;
  }
}

bool Tokenizer::contains(char c) const {
  return char_to_id_[static_cast<unsigned char>(c)] >= 0;
}

int Tokenizer::char_id(char c) const {
  int id = char_to_id_[static_cast<unsigned char>(c)];
  if (id < 0) {
    throw VocabError("character code " + std::to_string(static_cast<unsigned char>(c)) +
                     " is not in the vocabulary");
  }
  return id;
}

char Tokenizer::id_char(int id) const {
  if (id < 2 || id >= vocab_size()) {
    throw VocabError("token id " + std::to_string(id) + " has no character");
  }
  return alphabet_[static_cast<size_t>(id - 2)];
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(char_id(c));
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string text;
  text.reserve(ids.size());
  for (int id : ids) {
    if (id == kBos || id == kEos) continue;
    text.push_back(id_char(id));
  }
  return text;
}

}  // namespace fuselm
