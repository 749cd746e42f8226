#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fuselm/data.hpp"
#include "fuselm/fuser.hpp"
#include "fuselm/tensor.hpp"

namespace fuselm {

struct TrainConfig {
  // Two-stage fused schedule: stage 1 trains the gate against frozen
  // specialists, stage 2 fine-tunes everything jointly.
  int n1_steps = 200;
  int n2_steps = 300;
  double lr1 = 3e-4;
  double lr2 = 3e-4;
  int per_domain_batch = 8;

  // AdamW.
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm ceiling; <=0 disables

  // Specialist pre-training.
  int pretrain_steps = 400;
  double pretrain_lr = 1e-3;
  int pretrain_batch = 16;

  uint64_t seed = 1;
  int checkpoint_every = 0;  // fused stage 2 snapshot interval; 0 = off

  void validate() const;  // ConfigError
};

// Half-cosine decay from `base` to 0 over `total` steps, evaluated at `step`.
// Each training stage restarts the schedule.
double cosine_lr(int64_t step, int64_t total_steps, double base_lr);

// Decoupled-weight-decay Adam with bias correction. `OptState` persists the
// moments between calls; slot i belongs to params[i] (callers keep the order
// stable, which the named-parameter lists guarantee).
struct OptState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
  int64_t step = 0;  // number of updates applied

  static OptState for_params(const ParamRefs& params);
};

// Applies one update from the gradients currently stored on the parameters.
// Parameters without an accumulated gradient are treated as zero-gradient
// (decay still applies). Norm clipping happens here, over the whole group.
void adamw_step(const ParamRefs& params, OptState& state, double lr,
                const TrainConfig& config);

// L2 norm over every accumulated gradient in the group.
double global_grad_norm(const ParamRefs& params);

// Append-only JSONL metrics writer. One self-contained object per line.
class MetricsLog {
 public:
  MetricsLog() = default;  // disabled
  explicit MetricsLog(const std::filesystem::path& path);
  void append_json(const std::string& json_line);
  bool enabled() const { return out_.has_value(); }

 private:
  std::optional<std::ofstream> out_;
};

// ---- specialist pre-training ----------------------------------------------

// Trains a fresh specialist on its domain corpus (response-span loss under
// the specialist's own template). Deterministic in (config, seed).
Specialist pretrain_specialist(const DomainCorpus& corpus, const LmConfig& config,
                               const PromptTemplate& prompt_template,
                               const TrainConfig& tconfig, const Tokenizer& tokenizer,
                               MetricsLog* log = nullptr);

// ---- fused two-stage schedule ----------------------------------------------

struct StageReport {
  int stage = 0;
  int64_t steps = 0;  // optimizer steps executed by this call
  double first_loss = 0.0;
  double last_loss = 0.0;
  double mean_loss = 0.0;
};

using SamplerFn = std::function<std::vector<BatchRef>(int64_t step)>;

// Optional hook invoked after each optimizer step (checkpointing, eval).
using StepHook = std::function<void(int stage, int64_t step, double loss)>;

// In-flight training snapshot. Because batches are a pure function of
// (seed, step), restoring {model tensors, optimizer moments, next_step} and
// rerunning a stage reproduces the uninterrupted run bit for bit.
struct TrainState {
  OptState opt;
  int stage = 0;
  int64_t next_step = 0;
  // Cooperative pause: stop before this step while keeping the learning-rate
  // schedule on the stage's full horizon. Negative = run to completion. The
  // request is not persisted; a reloaded state resumes normally.
  int64_t stop_step = -1;
};

// Stage 1: gate-only updates, specialists bit-frozen (their forward runs
// grad-free, the optimizer only sees gate parameters). Throws
// DivergenceError if the loss goes non-finite. When `io_state` is given and
// matches the stage, training resumes from io_state->next_step; the final
// state is written back either way.
StageReport train_stage1(FusedModel& model,
                         std::span<const DomainCorpus> corpora,
                         const TrainConfig& config, const Tokenizer& tokenizer,
                         const SamplerFn& sampler, MetricsLog* log = nullptr,
                         const StepHook& hook = {}, TrainState* io_state = nullptr);

// Stage 2: joint fine-tuning of gate and specialists, fresh optimizer state.
StageReport train_stage2(FusedModel& model,
                         std::span<const DomainCorpus> corpora,
                         const TrainConfig& config, const Tokenizer& tokenizer,
                         const SamplerFn& sampler, MetricsLog* log = nullptr,
                         const StepHook& hook = {}, TrainState* io_state = nullptr);

// Snapshot / restore of a paused stage (model + optimizer moments + cursor).
void save_train_state(const std::filesystem::path& path, const FusedModel& model,
                      const TrainState& state);
std::pair<FusedModel, TrainState> load_train_state(const std::filesystem::path& path,
                                                   const Tokenizer& tokenizer);

// Convenience: balanced sampler over the corpora with the config's seed.
SamplerFn make_balanced_sampler(std::span<const DomainCorpus> corpora,
                                const TrainConfig& config);
// Contrast sampler for the balance ablation: pooled stream, same total batch.
SamplerFn make_pooled_sampler(std::span<const DomainCorpus> corpora,
                              const TrainConfig& config);

}  // namespace fuselm
