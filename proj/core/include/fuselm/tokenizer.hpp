#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fuselm {

// Character-level tokenizer over a fixed printable alphabet, shared by every
// specialist so that fused models see position-aligned id streams. Ids 0 and
// 1 are the sequence markers; characters map to contiguous ids from 2.
// The alphabet is part of the checkpoint contract: changing it invalidates
// every stored model, so it is a compile-time constant here.
class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;

  Tokenizer();

  int vocab_size() const { return static_cast<int>(2 + alphabet_.size()); }

  bool contains(char c) const;

  // Characters only; no markers are added. VocabError on any unknown char.
  std::vector<int> encode(std::string_view text) const;

  // Inverse of encode. Marker ids are skipped; ids outside the vocabulary
  // raise VocabError.
  std::string decode(std::span<const int> ids) const;

  // Single-token helpers.
  int char_id(char c) const;        // VocabError if absent
  char id_char(int id) const;       // VocabError on markers / out-of-range

  std::string_view alphabet() const { return alphabet_; }

 private:
  std::string alphabet_;
  std::array<int, 256> char_to_id_;
};

}  // namespace fuselm
