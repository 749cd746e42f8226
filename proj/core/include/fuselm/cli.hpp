#pragma once

#include <cstdint>
#include <string>

#include "fuselm/lm.hpp"
#include "fuselm/train.hpp"

namespace fuselm {

// Process exit codes, stable API for scripts.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;      // unexpected error
inline constexpr int kExitConfig = 2;       // bad flags / config file
inline constexpr int kExitData = 3;         // corpus/vocab/alignment problems
inline constexpr int kExitDivergence = 4;   // training loss went non-finite
inline constexpr int kExitIo = 5;           // filesystem / serialization

// Everything a run needs, loadable from a JSON file and overridable by flags.
// Unknown keys are rejected so typos cannot silently fall back to defaults.
struct RunConfig {
  LmConfig model;          // vocab_size filled in from the tokenizer
  int gate_hidden = 0;     // 0 means "same as d_model"
  int train_size = 2000;   // per-domain corpus sizes
  int heldout_size = 200;
  TrainConfig train;
  std::string out_dir = "run";

  static RunConfig defaults();
  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  // Canonical resolved form (sorted keys, every field explicit). Hash of this
  // text ties checkpoints to the configuration that produced them.
  std::string to_json_text() const;
  uint64_t content_hash() const;
  void validate() const;

  int gate_hidden_resolved() const { return gate_hidden > 0 ? gate_hidden : model.d_model; }
};

// Full command-line dispatcher (subcommands: prepare-data, train-specialist,
// train-fused, generate, eval, analyze). Returns a process exit code; never
// throws. Log verbosity comes from the FUSELM_LOG_LEVEL environment variable
// (0 = quiet, 1 = progress [default], 2 = debug), logs go to stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace fuselm
