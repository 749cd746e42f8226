#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fuselm/fuser.hpp"
#include "fuselm/tokenizer.hpp"

namespace fuselm {

struct GenerationConfig {
  int max_new_tokens = 64;
  // 0 = greedy (argmax, ties to the lowest id); >0 samples from
  // softmax(logits / temperature).
  double temperature = 0.0;
  std::optional<int> top_k;  // keep k highest logits before sampling
  uint64_t seed = 0;         // sampling stream
  // Exact one-hot mixture: the selected specialist's logits pass through
  // unchanged (weight 1, all others 0) instead of softmax weights.
  std::optional<int> force_specialist;
};

struct StepTrace {
  int token_id = 0;
  std::vector<double> weights;  // mixture weights at this step
  int dominant_specialist = 0;  // argmax of weights
};

struct GenerationResult {
  std::string text;              // decoded response (markers stripped)
  std::vector<int> token_ids;    // raw selected ids, end marker included
  std::vector<StepTrace> trace;  // one entry per emitted token
};

// Reference fused decoder: every step re-runs each specialist on its full
// templated context, fuses final-position logits, selects one token and
// appends it to all streams. Stops on the end marker, max_new_tokens, or
// when any stream reaches the context window.
GenerationResult generate_fused(const FusedModel& model, std::string_view prompt,
                                const GenerationConfig& config,
                                const Tokenizer& tokenizer);

// Single-model decoding under the specialist's own template.
GenerationResult generate_specialist(const Specialist& spec, std::string_view prompt,
                                     const GenerationConfig& config,
                                     const Tokenizer& tokenizer);

// ---- engine orchestration ---------------------------------------------------
//
// The production decoding path treats each specialist as a session that can
// be stepped one position, paused, and resumed with an externally chosen
// token. The orchestrator holds the barrier: it steps every engine, fuses
// their paused outputs, selects the next token, and broadcasts it.

class EngineHandle {
 public:
  // Binds a (non-owned) specialist and primes the session with its templated
  // prompt. The prompt is processed lazily by the first step().
  EngineHandle(const Specialist& spec, std::string_view prompt,
               const Tokenizer& tokenizer);

  struct StepOutput {
    std::vector<double> hidden;  // final-norm state at the paused position
    std::vector<double> logits;  // next-token logits at the paused position
  };

  // Advances to the next decision point and pauses. Throws StateError when
  // called out of protocol (already paused, or finished) and LengthError when
  // the context window is exhausted.
  StepOutput step();

  // Supplies the fused decision. The engine appends the token to its own
  // context. Resuming with the stop token (or anything after it) finishes the
  // session; resume when not paused throws StateError.
  void resume(int token_id);

  bool paused() const { return paused_; }
  bool finished() const { return finished_; }
  int steps_taken() const { return steps_taken_; }
  int context_len() const { return static_cast<int>(ids_.size()) + static_cast<int>(pending_.size()); }
  const Specialist& specialist() const { return *spec_; }

 private:
  void feed_token(int token_id);  // one cached transformer position

  const Specialist* spec_;
  int d_ = 0, n_heads_ = 0, head_dim_ = 0;
  std::vector<int> ids_;       // tokens already in the KV cache
  std::vector<int> pending_;   // tokens awaiting processing
  // Per layer, row-major [pos, d] key and value caches.
  std::vector<std::vector<double>> k_cache_, v_cache_;
  std::vector<double> last_hidden_, last_logits_;
  bool paused_ = false;
  bool finished_ = false;
  int steps_taken_ = 0;
};

using TokenSink = std::function<void(int token_id, const StepTrace& trace)>;

// Lockstep fused decoding over independently paused engines. All engines must
// expose the same vocabulary; the loop asserts they stay position-aligned.
// Returns the selected ids (end marker included when emitted).
std::vector<int> orchestrate(std::span<EngineHandle> engines, const GateNetwork& gate,
                             const GenerationConfig& config,
                             const TokenSink& sink = {});

// Convenience wrapper: builds one engine per specialist and orchestrates.
GenerationResult generate_fused_cached(const FusedModel& model,
                                       std::string_view prompt,
                                       const GenerationConfig& config,
                                       const Tokenizer& tokenizer,
                                       const TokenSink& sink = {});

}  // namespace fuselm
