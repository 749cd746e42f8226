#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fuselm/data.hpp"
#include "fuselm/ops.hpp"
#include "fuselm/tensor.hpp"
#include "fuselm/tokenizer.hpp"

namespace fuselm {

struct LmConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int feedforward_mult = 4;
  int max_seq_len = 256;

  int d_ff() const { return d_model * feedforward_mult; }
  void validate() const;  // ConfigError on nonsense
  bool operator==(const LmConfig&) const = default;
};

struct LayerParams {
  Tensor attn_norm_w;       // [d]
  Tensor wq, wk, wv, wo;    // [d,d]
  Tensor ffn_norm_w;        // [d]
  Tensor w1;                // [d, d_ff]
  Tensor w2;                // [d_ff, d]
};

struct LmParams {
  Tensor tok_emb;       // [V,d]
  Tensor pos_emb;       // [max_seq_len, d]
  std::vector<LayerParams> layers;
  Tensor final_norm_w;  // [d]
  Tensor head;          // [d,V], zero-initialized
};

struct SpecialistOutput {
  Tensor hidden;  // [T,d] after the final normalization (what the head and the
                  // gating network both consume)
  Tensor logits;  // [T,V]
};

// Decoder-only character LM bound to one domain and one prompt format.
// Pre-norm residual blocks, learned absolute positions, ReLU feed-forward,
// no biases in attention or feed-forward. The output head starts at zero so
// an untrained model is exactly uniform over the vocabulary.
class Specialist {
 public:
  static Specialist init(const LmConfig& config, Domain domain,
                         PromptTemplate prompt_template, uint64_t seed);

  const LmConfig& config() const { return config_; }
  Domain domain() const { return domain_; }
  const PromptTemplate& prompt_template() const { return template_; }
  LmParams& params() { return params_; }
  const LmParams& params() const { return params_; }

  // Stable names, stable order; handles share storage with the model.
  ParamRefs named_params() const;
  int64_t param_count() const;

  // Full forward pass. LengthError beyond max_seq_len; ids validated against
  // the embedding table. Tracked on the tape unless a NoGradGuard is active.
  SpecialistOutput forward(std::span<const int> tokens) const;
  // Same, stopping at the final hidden state (fusion applies the head only to
  // the rows it needs).
  Tensor forward_hidden(std::span<const int> tokens) const;

  // Logits for selected sequence positions: gathers `rows` of the hidden
  // state and applies the head. Row values match the corresponding rows of
  // forward().logits bit for bit.
  Tensor logits_at(const Tensor& hidden, std::span<const int> rows) const;

 private:
  Specialist() = default;

  LmConfig config_;
  Domain domain_ = Domain::kText;
  PromptTemplate template_;
  LmParams params_;
};

// Mean response-span negative log-likelihood of one example under the
// specialist's own template (teacher forcing).
double response_nll(const Specialist& spec, const TrainingExample& ex,
                    const Tokenizer& tokenizer);

struct PerplexityResult {
  double nll_sum = 0.0;      // summed over tokens
  int64_t token_count = 0;
  double mean_nll() const { return nll_sum / static_cast<double>(token_count); }
  double perplexity() const;
};

PerplexityResult specialist_perplexity(const Specialist& spec,
                                       std::span<const TrainingExample> examples,
                                       const Tokenizer& tokenizer);

// Checkpoint I/O (single-model container).
void save_specialist(const std::filesystem::path& path, const Specialist& spec);
Specialist load_specialist(const std::filesystem::path& path,
                           const Tokenizer& tokenizer);

}  // namespace fuselm
