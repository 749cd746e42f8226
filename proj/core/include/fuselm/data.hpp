#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fuselm/tokenizer.hpp"

namespace fuselm {

enum class Domain { kText = 0, kCode = 1, kMath = 2 };
inline constexpr int kNumDomains = 3;
inline constexpr std::array<Domain, 3> kAllDomains = {Domain::kText, Domain::kCode,
                                                      Domain::kMath};

std::string_view domain_name(Domain d);
Domain domain_from_name(std::string_view name);  // DomainError on unknown

struct TrainingExample {
  Domain domain;
  std::string prompt;
  std::string response;
};

// Instruction-style prompt wrapper. Each specialist carries its own template;
// rendered text = prefix + prompt + infix + response + suffix.
struct PromptTemplate {
  std::string prefix;
  std::string infix;
  std::string suffix;

  std::string render(std::string_view prompt, std::string_view response) const;
};

// The three built-in formats, one per specialist, index-aligned with
// kAllDomains (text, code, math).
std::array<PromptTemplate, 3> builtin_templates();

struct DomainCorpus {
  Domain domain;
  std::vector<TrainingExample> train;
  std::vector<TrainingExample> heldout;
};

// Deterministic synthetic corpus for one domain. Train and held-out splits
// are drawn from one stream and never overlap.
DomainCorpus synth_corpus(Domain domain, int train_size, int heldout_size,
                          uint64_t seed);

// Recursive-descent evaluation of the arithmetic expressions the math domain
// uses ('+', '-', '*', with '*' binding tighter). Exposed for verification.
long long eval_arithmetic(std::string_view expr);

// Fraction of distinct character 4-grams of `a` that also occur in `b`.
double shared_ngram_fraction(std::span<const TrainingExample> a,
                             std::span<const TrainingExample> b, int n = 4);

// One example tokenized under every specialist's template. Streams share the
// response ids; prompts differ per template, so each stream records its own
// response start. Construction throws LengthError past max_seq_len and
// AlignmentError if response spans cannot be made identical.
struct WrappedExample {
  Domain domain;
  std::vector<std::vector<int>> tokens;  // S streams, markers included
  std::vector<int> response_start;       // index of first response position, per stream
  int response_len = 0;                  // response chars + end marker

  int num_streams() const { return static_cast<int>(tokens.size()); }
  std::span<const int> response_ids(int stream) const;
};

WrappedExample wrap_example(const TrainingExample& ex,
                            std::span<const PromptTemplate> templates,
                            const Tokenizer& tokenizer, int max_seq_len);

// ---- batch sampling ------------------------------------------------------

struct BatchRef {
  Domain domain;
  int index;  // into that domain's train split
};

// Domain-balanced sampler: batch(step) holds exactly `per_domain` examples
// from each domain, drawn from per-domain epoch permutations without
// replacement; a batch may straddle an epoch boundary. The mapping
// (sizes, per_domain, seed, step) -> batch is pure, which is what makes
// checkpoint resume bit-exact: replaying a step index reproduces its batch.
class BalancedSampler {
 public:
  BalancedSampler(std::array<int, 3> train_sizes, int per_domain, uint64_t seed);

  std::vector<BatchRef> batch(int64_t step) const;
  int per_domain() const { return per_domain_; }
  int batch_size() const { return per_domain_ * kNumDomains; }

 private:
  int64_t position_to_index(int domain, int64_t position) const;

  std::array<int, 3> sizes_;
  int per_domain_;
  uint64_t seed_;
  // Epoch permutation memo (epoch index + order), one slot per domain.
  mutable std::array<int64_t, 3> cached_epoch_;
  mutable std::array<std::vector<int64_t>, 3> cached_perm_;
};

// Unbalanced contrast sampler: all domains pooled into one stream, shuffled
// per epoch; batch(step) takes the next `batch_size` entries. Domain counts
// per batch fluctuate by chance. Same purity guarantees as above.
class PooledSampler {
 public:
  PooledSampler(std::array<int, 3> train_sizes, int batch_size, uint64_t seed);

  std::vector<BatchRef> batch(int64_t step) const;
  int batch_size() const { return batch_size_; }

 private:
  std::array<int, 3> sizes_;
  int batch_size_;
  int64_t total_;
  uint64_t seed_;
  mutable int64_t cached_epoch_ = -1;
  mutable std::vector<int64_t> cached_perm_;
};

// ---- corpus serialization --------------------------------------------------

// One JSON object per line: {"domain": ..., "prompt": ..., "response": ...}.
void save_corpus_jsonl(const std::filesystem::path& path,
                       std::span<const TrainingExample> examples);
std::vector<TrainingExample> load_corpus_jsonl(const std::filesystem::path& path);

// Writes <dir>/{text,code,math}.jsonl (+ .heldout.jsonl) and a manifest with
// sizes, seed and a content checksum per file.
void save_corpora(const std::filesystem::path& dir,
                  std::span<const DomainCorpus> corpora, uint64_t seed);
std::vector<DomainCorpus> load_corpora(const std::filesystem::path& dir);

}  // namespace fuselm
