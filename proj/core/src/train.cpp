#include "fuselm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "fuselm/checkpoint.hpp"
#include "fuselm/rng.hpp"
#include "lm_internal.hpp"

namespace fuselm {

using nlohmann::json;

void TrainConfig::validate() const {
  if (n1_steps < 0 || n2_steps < 0) throw ConfigError("stage step counts must be non-negative");
  if (lr1 <= 0 || lr2 <= 0 || pretrain_lr <= 0) throw ConfigError("learning rates must be positive");
  if (per_domain_batch <= 0) throw ConfigError("per_domain_batch must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw ConfigError("adam betas must lie in [0,1)");
  }
  if (eps <= 0) throw ConfigError("adam eps must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (pretrain_steps < 0) throw ConfigError("pretrain_steps must be non-negative");
  if (pretrain_batch <= 0) throw ConfigError("pretrain_batch must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0) throw ConfigError("cosine_lr: negative step");
  if (step > total_steps) step = total_steps;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

OptState OptState::for_params(const ParamRefs& params) {
  OptState s;
  s.slots.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const size_t n = static_cast<size_t>(params[i].tensor.numel());
    s.slots[i].m.assign(n, 0.0);
    s.slots[i].v.assign(n, 0.0);
  }
  return s;
}

double global_grad_norm(const ParamRefs& params) {
  double sq = 0.0;
  for (const NamedParam& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void adamw_step(const ParamRefs& params, OptState& state, double lr,
                const TrainConfig& config) {
  if (state.slots.size() != params.size()) {
    throw ConfigError("optimizer state does not match the parameter group");
  }
  double clip_scale = 1.0;
  if (config.grad_clip > 0.0) {
    const double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is non-finite");
    if (norm > config.grad_clip) clip_scale = config.grad_clip / norm;
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

  for (size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto& slot = state.slots[i];
    const size_t n = static_cast<size_t>(t.numel());
    if (slot.m.size() != n) {
      throw ConfigError("optimizer slot for '" + params[i].name +
                        "' has the wrong size");
    }
    auto values = t.mutable_values();
    const bool has_grad = t.has_grad();
    std::span<const double> grad;
    if (has_grad) grad = t.grad();
    for (size_t j = 0; j < n; ++j) {
      const double g = has_grad ? grad[j] * clip_scale : 0.0;
      slot.m[j] = config.beta1 * slot.m[j] + (1.0 - config.beta1) * g;
      slot.v[j] = config.beta2 * slot.v[j] + (1.0 - config.beta2) * g * g;
      const double mhat = slot.m[j] / bc1;
      const double vhat = slot.v[j] / bc2;
      // Decoupled decay: the regularizer scales the raw weight, not the
      // adaptive update.
      values[j] -= lr * (mhat / (std::sqrt(vhat) + config.eps) +
                         config.weight_decay * values[j]);
    }
  }
}

MetricsLog::MetricsLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.emplace(path, std::ios::binary | std::ios::app);
  if (!*out_) throw IoError("cannot open metrics log " + path.string());
}

void MetricsLog::append_json(const std::string& json_line) {
  if (!out_) return;
  *out_ << json_line << '\n';
  out_->flush();
}

// ---- samplers ---------------------------------------------------------------

namespace {

// Corpora in canonical domain order; SamplerError when one is missing.
std::array<const DomainCorpus*, 3> corpus_by_domain(
    std::span<const DomainCorpus> corpora) {
  std::array<const DomainCorpus*, 3> by_domain{};
  for (const DomainCorpus& c : corpora) {
    by_domain[static_cast<size_t>(c.domain)] = &c;
  }
  for (size_t d = 0; d < by_domain.size(); ++d) {
    if (!by_domain[d]) {
      throw SamplerError("no corpus for domain '" +
                         std::string(domain_name(kAllDomains[d])) + "'");
    }
  }
  return by_domain;
}

std::array<int, 3> train_sizes(std::span<const DomainCorpus> corpora) {
  auto by_domain = corpus_by_domain(corpora);
  std::array<int, 3> sizes{};
  for (size_t d = 0; d < sizes.size(); ++d) {
    sizes[d] = static_cast<int>(by_domain[d]->train.size());
  }
  return sizes;
}

}  // namespace

SamplerFn make_balanced_sampler(std::span<const DomainCorpus> corpora,
                                const TrainConfig& config) {
  auto sampler = std::make_shared<BalancedSampler>(
      train_sizes(corpora), config.per_domain_batch,
      derive_seed(config.seed, "batch-stream"));
  return [sampler](int64_t step) { return sampler->batch(step); };
}

SamplerFn make_pooled_sampler(std::span<const DomainCorpus> corpora,
                              const TrainConfig& config) {
  auto sampler = std::make_shared<PooledSampler>(
      train_sizes(corpora), config.per_domain_batch * kNumDomains,
      derive_seed(config.seed, "batch-stream"));
  return [sampler](int64_t step) { return sampler->batch(step); };
}

// ---- specialist pre-training -------------------------------------------------

Specialist pretrain_specialist(const DomainCorpus& corpus, const LmConfig& config,
                               const PromptTemplate& prompt_template,
                               const TrainConfig& tconfig, const Tokenizer& tokenizer,
                               MetricsLog* log) {
  config.validate();
  tconfig.validate();
  if (corpus.train.empty()) throw SamplerError("pretraining corpus is empty");
  const std::string domain(domain_name(corpus.domain));

  Specialist spec = Specialist::init(config, corpus.domain, prompt_template,
                                     derive_seed(tconfig.seed, "init/" + domain));
  ParamRefs params = spec.named_params();
  OptState opt = OptState::for_params(params);

  // Without-replacement stream over the domain's training split, reshuffled
  // every epoch, addressed purely by step index.
  const int64_t size = static_cast<int64_t>(corpus.train.size());
  const uint64_t stream_seed = derive_seed(tconfig.seed, "pretrain/" + domain);
  int64_t cached_epoch = -1;
  std::vector<int64_t> perm;

  const PromptTemplate tpl[] = {prompt_template};
  const int batch = tconfig.pretrain_batch;
  for (int64_t step = 0; step < tconfig.pretrain_steps; ++step) {
    double batch_loss = 0.0;
    for (int b = 0; b < batch; ++b) {
      const int64_t position = step * batch + b;
      const int64_t epoch = position / size;
      if (epoch != cached_epoch) {
        Rng rng(derive_seed(stream_seed, static_cast<uint64_t>(epoch)));
        perm = rng.permutation(size);
        cached_epoch = epoch;
      }
      const TrainingExample& ex = corpus.train[static_cast<size_t>(perm[static_cast<size_t>(position % size)])];
      WrappedExample w = wrap_example(ex, tpl, tokenizer, config.max_seq_len);
      const std::vector<int>& ids = w.tokens[0];
      try {
        SpecialistOutput out = spec.forward(ids);
        std::vector<int> targets(ids.size(), 0);
        std::vector<uint8_t> mask(ids.size(), 0);
        for (int r = 0; r < w.response_len; ++r) {
          const int row = w.response_start[0] - 1 + r;
          targets[static_cast<size_t>(row)] = ids[static_cast<size_t>(row + 1)];
          mask[static_cast<size_t>(row)] = 1;
        }
        Tensor loss = cross_entropy(out.logits, targets, mask);
        batch_loss += loss.scalar_value() / batch;
        // Per-example backward; gradients accumulate additively across the
        // batch, and the 1/batch factor turns the sum into a mean.
        backward(scale(loss, 1.0 / batch));
      } catch (const NumericError& e) {
        // Non-finite values mid-graph are the practical face of divergence.
        throw DivergenceError("pretraining diverged on domain " + domain + ": " +
                                  e.what(),
                              step);
      }
    }
    if (!std::isfinite(batch_loss)) {
      throw DivergenceError("pretraining loss diverged on domain " + domain, step);
    }
    const double lr = cosine_lr(step, tconfig.pretrain_steps, tconfig.pretrain_lr);
    adamw_step(params, opt, lr, tconfig);
    for (NamedParam& p : params) p.tensor.zero_grad();
    if (log) {
      json j;
      j["domain"] = domain;
      j["kind"] = "pretrain";
      j["loss"] = batch_loss;
      j["lr"] = lr;
      j["step"] = step;
      log->append_json(j.dump());
    }
  }
  return spec;
}

// ---- fused stages -------------------------------------------------------------

namespace {

StageReport run_fused_stage(FusedModel& model, std::span<const DomainCorpus> corpora,
                            const TrainConfig& config, const Tokenizer& tokenizer,
                            const SamplerFn& sampler, MetricsLog* log,
                            const StepHook& hook, TrainState* io_state, int stage) {
  config.validate();
  model.validate();
  if (!sampler) throw ConfigError("stage training needs a batch sampler");
  auto by_domain = corpus_by_domain(corpora);

  const int64_t total_steps = stage == 1 ? config.n1_steps : config.n2_steps;
  const double base_lr = stage == 1 ? config.lr1 : config.lr2;
  const FuseMode mode = stage == 1 ? FuseMode::kGateOnly : FuseMode::kTracked;
  // Stage 1 adapts the gate only; stage 2 unlocks everything jointly.
  ParamRefs params = stage == 1 ? model.gate_params() : model.named_params();

  int64_t start_step = 0;
  OptState opt;
  if (io_state && io_state->stage == stage && io_state->next_step > 0) {
    start_step = io_state->next_step;
    opt = std::move(io_state->opt);
    if (opt.slots.size() != params.size()) {
      throw ConfigError("resume state does not match the stage's parameter group");
    }
  } else {
    opt = OptState::for_params(params);
  }
  int64_t end_step = total_steps;
  if (io_state && io_state->stop_step >= 0) {
    end_step = std::min(end_step, io_state->stop_step);
  }

  StageReport report;
  report.stage = stage;
  report.steps = std::max<int64_t>(end_step - start_step, 0);
  double loss_sum = 0.0;
  const auto templates = model.templates();

  for (int64_t step = start_step; step < end_step; ++step) {
    const std::vector<BatchRef> batch = sampler(step);
    if (batch.empty()) throw SamplerError("sampler produced an empty batch");
    const double inv = 1.0 / static_cast<double>(batch.size());
    double batch_loss = 0.0;
    for (const BatchRef& ref : batch) {
      const auto& train_split = by_domain[static_cast<size_t>(ref.domain)]->train;
      if (ref.index < 0 || ref.index >= static_cast<int>(train_split.size())) {
        throw SamplerError("sampler referenced example " + std::to_string(ref.index) +
                           " outside corpus of " + std::to_string(train_split.size()));
      }
      WrappedExample w = wrap_example(train_split[static_cast<size_t>(ref.index)],
                                      templates, tokenizer, model.config().max_seq_len);
      try {
        Tensor loss = fused_response_loss(model, w, mode);
        batch_loss += loss.scalar_value() * inv;
        backward(scale(loss, inv));
      } catch (const NumericError& e) {
        // Non-finite values mid-graph are the practical face of divergence.
        throw DivergenceError("stage " + std::to_string(stage) +
                                  " forward produced non-finite values: " + e.what(),
                              step);
      }
    }
    if (!std::isfinite(batch_loss)) {
      throw DivergenceError("stage " + std::to_string(stage) + " loss diverged",
                            step);
    }
    const double lr = cosine_lr(step, total_steps, base_lr);
    adamw_step(params, opt, lr, config);
    for (NamedParam& p : params) p.tensor.zero_grad();

    if (step == start_step) report.first_loss = batch_loss;
    report.last_loss = batch_loss;
    loss_sum += batch_loss;
    if (log) {
      json j;
      j["kind"] = "fused";
      j["loss"] = batch_loss;
      j["lr"] = lr;
      j["stage"] = stage;
      j["step"] = step;
      log->append_json(j.dump());
    }
    if (hook) hook(stage, step, batch_loss);
  }

  report.mean_loss =
      report.steps > 0 ? loss_sum / static_cast<double>(report.steps) : 0.0;
  if (io_state) {
    io_state->opt = std::move(opt);
    io_state->stage = stage;
    io_state->next_step = end_step;
  }
  return report;
}

}  // namespace

StageReport train_stage1(FusedModel& model, std::span<const DomainCorpus> corpora,
                         const TrainConfig& config, const Tokenizer& tokenizer,
                         const SamplerFn& sampler, MetricsLog* log,
                         const StepHook& hook, TrainState* io_state) {
  return run_fused_stage(model, corpora, config, tokenizer, sampler, log, hook,
                         io_state, 1);
}

StageReport train_stage2(FusedModel& model, std::span<const DomainCorpus> corpora,
                         const TrainConfig& config, const Tokenizer& tokenizer,
                         const SamplerFn& sampler, MetricsLog* log,
                         const StepHook& hook, TrainState* io_state) {
  return run_fused_stage(model, corpora, config, tokenizer, sampler, log, hook,
                         io_state, 2);
}

void save_train_state(const std::filesystem::path& path, const FusedModel& model,
                      const TrainState& state) {
  model.validate();
  Container c;
  json meta;
  meta["kind"] = "train_state";
  meta["model"] = detail_lm::fused_meta(model);
  meta["stage"] = state.stage;
  meta["next_step"] = state.next_step;
  meta["opt_step"] = state.opt.step;
  c.meta_json = meta.dump();
  c.tensors = detail_lm::fused_tensors(model);

  // Optimizer moments ride along as shadow tensors. Slot order equals the
  // stage's parameter order, which load_train_state reconstructs the same way.
  for (size_t i = 0; i < state.opt.slots.size(); ++i) {
    const auto& slot = state.opt.slots[i];
    c.tensors.emplace_back(
        "opt.m." + std::to_string(i),
        Tensor::from_values({static_cast<int64_t>(slot.m.size())}, slot.m));
    c.tensors.emplace_back(
        "opt.v." + std::to_string(i),
        Tensor::from_values({static_cast<int64_t>(slot.v.size())}, slot.v));
  }
  save_container(path, c);
}

std::pair<FusedModel, TrainState> load_train_state(const std::filesystem::path& path,
                                                   const Tokenizer& tokenizer) {
  Container c = load_container(path);
  json meta = json::parse(c.meta_json, nullptr, false);
  if (meta.is_discarded()) throw IoError("bad metadata in " + path.string());
  if (meta.value("kind", "") != "train_state") {
    throw IoError(path.string() + " does not hold a training snapshot");
  }
  size_t consumed = 0;
  FusedModel model =
      detail_lm::fused_from_parts(meta.at("model"), c.tensors, 0, &consumed, tokenizer);

  TrainState state;
  state.stage = meta.at("stage").get<int>();
  state.next_step = meta.at("next_step").get<int64_t>();
  state.opt.step = meta.at("opt_step").get<int64_t>();
  const size_t rest = c.tensors.size() - consumed;
  if (rest % 2 != 0) throw IoError("odd number of optimizer tensors in " + path.string());
  state.opt.slots.resize(rest / 2);
  for (size_t i = 0; i < state.opt.slots.size(); ++i) {
    const auto& [mname, mt] = c.tensors[consumed + 2 * i];
    const auto& [vname, vt] = c.tensors[consumed + 2 * i + 1];
    if (mname != "opt.m." + std::to_string(i) || vname != "opt.v." + std::to_string(i)) {
      throw IoError("unexpected optimizer tensor names in " + path.string());
    }
    auto mv = mt.values();
    auto vv = vt.values();
    state.opt.slots[i].m.assign(mv.begin(), mv.end());
    state.opt.slots[i].v.assign(vv.begin(), vv.end());
  }
  return {std::move(model), std::move(state)};
}

}  // namespace fuselm
