#include "fuselm/infer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fuselm/ops.hpp"
#include "fuselm/rng.hpp"

namespace fuselm {

namespace {

void validate_generation_config(const GenerationConfig& config) {
  if (config.max_new_tokens < 0) throw ConfigError("max_new_tokens must be non-negative");
  if (config.temperature < 0) throw ConfigError("temperature must be non-negative");
  if (config.top_k && *config.top_k <= 0) throw ConfigError("top_k must be positive");
}

// Greedy: highest logit, ties to the lowest id. Sampling: softmax at the
// given temperature, optionally truncated to the top-k logits.
int select_token(std::span<const double> logits, const GenerationConfig& config,
                 Rng& rng) {
  const int v = static_cast<int>(logits.size());
  if (v == 0) throw DimensionError("select_token: empty logits");
  if (config.temperature == 0.0) {
    int best = 0;
    for (int i = 1; i < v; ++i) {
      if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
    }
    return best;
  }
  std::vector<int> candidates(static_cast<size_t>(v));
  std::iota(candidates.begin(), candidates.end(), 0);
  if (config.top_k && *config.top_k < v) {
    // Highest logits first; equal logits keep id order (stable + id tiebreak).
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
      if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)]) {
        return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
      }
      return a < b;
    });
    candidates.resize(static_cast<size_t>(*config.top_k));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int id : candidates) {
    const double l = logits[static_cast<size_t>(id)];
    if (!std::isfinite(l)) throw NumericError("select_token: non-finite logit");
    mx = l > mx ? l : mx;
  }
  std::vector<double> probs(candidates.size());
  double denom = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    probs[i] = std::exp((logits[static_cast<size_t>(candidates[i])] - mx) /
                        config.temperature);
    denom += probs[i];
  }
  const double u = rng.next_double() * denom;
  double acc = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    acc += probs[i];
    if (u < acc) return candidates[i];
  }
  return candidates.back();  // u == denom edge case
}

std::vector<int> templated_prompt_ids(const Specialist& spec, std::string_view prompt,
                                      const Tokenizer& tokenizer) {
  const PromptTemplate& tpl = spec.prompt_template();
  std::vector<int> ids;
  ids.push_back(Tokenizer::kBos);
  const std::string head = tpl.prefix + std::string(prompt) + tpl.infix;
  for (int id : tokenizer.encode(head)) ids.push_back(id);
  if (static_cast<int>(ids.size()) >= spec.config().max_seq_len) {
    throw LengthError("prompt of " + std::to_string(ids.size()) +
                      " tokens leaves no room to generate within " +
                      std::to_string(spec.config().max_seq_len));
  }
  return ids;
}

GenerationResult finish_result(std::vector<int> token_ids,
                               std::vector<StepTrace> trace,
                               const Tokenizer& tokenizer) {
  GenerationResult r;
  r.text = tokenizer.decode(token_ids);
  r.token_ids = std::move(token_ids);
  r.trace = std::move(trace);
  return r;
}

}  // namespace

GenerationResult generate_fused(const FusedModel& model, std::string_view prompt,
                                const GenerationConfig& config,
                                const Tokenizer& tokenizer) {
  model.validate();
  validate_generation_config(config);
  const int s_count = model.num_specialists();
  if (config.force_specialist &&
      (*config.force_specialist < 0 || *config.force_specialist >= s_count)) {
    throw ConfigError("force_specialist index out of range");
  }
  NoGradGuard guard;
  Rng rng(derive_seed(config.seed, "sample"));

  std::vector<std::vector<int>> streams;
  streams.reserve(static_cast<size_t>(s_count));
  for (const Specialist& s : model.specialists) {
    streams.push_back(templated_prompt_ids(s, prompt, tokenizer));
  }

  std::vector<int> selected;
  std::vector<StepTrace> trace;
  for (int t = 0; t < config.max_new_tokens; ++t) {
    // Stop when any stream would overflow its context on this step.
    bool capped = false;
    for (const auto& ids : streams) {
      capped = capped || static_cast<int>(ids.size()) >= model.config().max_seq_len;
    }
    if (capped) break;

    std::vector<Tensor> last_hidden(static_cast<size_t>(s_count));
    std::vector<Tensor> last_logits(static_cast<size_t>(s_count));
    for (int s = 0; s < s_count; ++s) {
      const auto& ids = streams[static_cast<size_t>(s)];
      Tensor hidden = model.specialists[static_cast<size_t>(s)].forward_hidden(ids);
      const int rows[] = {static_cast<int>(ids.size()) - 1};
      last_hidden[static_cast<size_t>(s)] = embedding_lookup(hidden, rows);
      last_logits[static_cast<size_t>(s)] =
          matmul(last_hidden[static_cast<size_t>(s)],
                 model.specialists[static_cast<size_t>(s)].params().head);
    }

    Tensor weights;
    if (config.force_specialist) {
      std::vector<double> w(static_cast<size_t>(s_count), 0.0);
      w[static_cast<size_t>(*config.force_specialist)] = 1.0;
      weights = Tensor::from_values({1, s_count}, std::move(w));
    } else {
      std::vector<Tensor> scores(static_cast<size_t>(s_count));
      for (int s = 0; s < s_count; ++s) {
        scores[static_cast<size_t>(s)] = model.gate.score(last_hidden[static_cast<size_t>(s)]);
      }
      weights = fuse_weights(concat_scores(scores));
    }
    Tensor fused = fuse_logits(weights, last_logits);

    const int token = select_token(fused.values(), config, rng);
    StepTrace st;
    st.token_id = token;
    st.weights.assign(weights.values().begin(), weights.values().end());
    st.dominant_specialist = static_cast<int>(
        std::max_element(st.weights.begin(), st.weights.end()) - st.weights.begin());
    trace.push_back(std::move(st));
    selected.push_back(token);
    if (token == Tokenizer::kEos) break;
    for (auto& ids : streams) ids.push_back(token);
  }
  return finish_result(std::move(selected), std::move(trace), tokenizer);
}

GenerationResult generate_specialist(const Specialist& spec, std::string_view prompt,
                                     const GenerationConfig& config,
                                     const Tokenizer& tokenizer) {
  validate_generation_config(config);
  NoGradGuard guard;
  Rng rng(derive_seed(config.seed, "sample"));
  std::vector<int> ids = templated_prompt_ids(spec, prompt, tokenizer);

  std::vector<int> selected;
  std::vector<StepTrace> trace;
  for (int t = 0; t < config.max_new_tokens; ++t) {
    if (static_cast<int>(ids.size()) >= spec.config().max_seq_len) break;
    Tensor hidden = spec.forward_hidden(ids);
    const int rows[] = {static_cast<int>(ids.size()) - 1};
    Tensor logits = matmul(embedding_lookup(hidden, rows), spec.params().head);
    const int token = select_token(logits.values(), config, rng);
    StepTrace st;
    st.token_id = token;
    st.weights = {1.0};
    st.dominant_specialist = 0;
    trace.push_back(std::move(st));
    selected.push_back(token);
    if (token == Tokenizer::kEos) break;
    ids.push_back(token);
  }
  return finish_result(std::move(selected), std::move(trace), tokenizer);
}

// ---- cached engine -----------------------------------------------------------

namespace {

// Single-row y = x * W for row-major W [k,n]; same loop structure (k outer,
// n inner, zero-skip) as the batched kernel so cached and recomputed paths
// agree to the last bit on identical inputs.
void matvec(const double* x, const Tensor& w, double* out) {
  const int64_t k = w.dim(0), n = w.dim(1);
  std::fill(out, out + n, 0.0);
  const double* b = w.values().data();
  for (int64_t kk = 0; kk < k; ++kk) {
    const double xa = x[kk];
    if (xa == 0.0) continue;
    const double* bk = b + kk * n;
    for (int64_t j = 0; j < n; ++j) out[j] += xa * bk[j];
  }
}

void rmsnorm_row(const double* x, const Tensor& weight, double* out, int64_t d,
                 double eps = 1e-6) {
  const double* w = weight.values().data();
  double ssq = 0.0;
  for (int64_t j = 0; j < d; ++j) ssq += x[j] * x[j];
  const double r = 1.0 / std::sqrt(ssq / static_cast<double>(d) + eps);
  for (int64_t j = 0; j < d; ++j) out[j] = x[j] * r * w[j];
}

}  // namespace

EngineHandle::EngineHandle(const Specialist& spec, std::string_view prompt,
                           const Tokenizer& tokenizer)
    : spec_(&spec),
      d_(spec.config().d_model),
      n_heads_(spec.config().n_heads),
      head_dim_(spec.config().d_model / spec.config().n_heads) {
  pending_ = templated_prompt_ids(spec, prompt, tokenizer);
  const size_t cap = static_cast<size_t>(spec.config().max_seq_len) *
                     static_cast<size_t>(d_);
  k_cache_.assign(static_cast<size_t>(spec.config().n_layers), {});
  v_cache_.assign(static_cast<size_t>(spec.config().n_layers), {});
  for (auto& c : k_cache_) c.reserve(cap);
  for (auto& c : v_cache_) c.reserve(cap);
}

void EngineHandle::feed_token(int token_id) {
  const LmConfig& cfg = spec_->config();
  if (token_id < 0 || token_id >= cfg.vocab_size) {
    throw VocabError("engine fed token id " + std::to_string(token_id) +
                     " outside the vocabulary");
  }
  const int64_t pos = static_cast<int64_t>(ids_.size());
  if (pos >= cfg.max_seq_len) {
    throw LengthError("engine context window of " + std::to_string(cfg.max_seq_len) +
                      " tokens is exhausted");
  }
  const LmParams& p = spec_->params();
  const int64_t d = d_;

  std::vector<double> x(static_cast<size_t>(d));
  {
    const double* tok = p.tok_emb.values().data() + static_cast<int64_t>(token_id) * d;
    const double* ppos = p.pos_emb.values().data() + pos * d;
    for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(j)] = tok[j] + ppos[j];
  }

  std::vector<double> h(static_cast<size_t>(d)), q(static_cast<size_t>(d)),
      attn_out(static_cast<size_t>(d)), proj(static_cast<size_t>(d));
  std::vector<double> ff(static_cast<size_t>(spec_->config().d_ff()));
  std::vector<double> scores;
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& layer = p.layers[l];
    rmsnorm_row(x.data(), layer.attn_norm_w, h.data(), d);
    matvec(h.data(), layer.wq, q.data());
    auto& kc = k_cache_[l];
    auto& vc = v_cache_[l];
    kc.resize(static_cast<size_t>(pos + 1) * static_cast<size_t>(d));
    vc.resize(static_cast<size_t>(pos + 1) * static_cast<size_t>(d));
    matvec(h.data(), layer.wk, kc.data() + pos * d);
    matvec(h.data(), layer.wv, vc.data() + pos * d);

    // Causal attention over the cache: softmax rows only ever see positions
    // <= pos, which is exactly what the full-matrix mask admits.
    const double scl = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    scores.assign(static_cast<size_t>(pos + 1), 0.0);
    std::fill(attn_out.begin(), attn_out.end(), 0.0);
    for (int hh = 0; hh < n_heads_; ++hh) {
      const int64_t off = static_cast<int64_t>(hh) * head_dim_;
      const double* qh = q.data() + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j <= pos; ++j) {
        const double* kj = kc.data() + j * d + off;
        double acc = 0.0;
        for (int64_t t = 0; t < head_dim_; ++t) acc += qh[t] * kj[t];
        const double sc = acc * scl;
        scores[static_cast<size_t>(j)] = sc;
        mx = sc > mx ? sc : mx;
      }
      if (!std::isfinite(mx)) throw NumericError("engine attention produced non-finite scores");
      double denom = 0.0;
      for (int64_t j = 0; j <= pos; ++j) {
        const double e = std::exp(scores[static_cast<size_t>(j)] - mx);
        scores[static_cast<size_t>(j)] = e;
        denom += e;
      }
      double* oh = attn_out.data() + off;
      for (int64_t j = 0; j <= pos; ++j) {
        const double a = scores[static_cast<size_t>(j)] / denom;
        if (a == 0.0) continue;
        const double* vj = vc.data() + j * d + off;
        for (int64_t t = 0; t < head_dim_; ++t) oh[t] += a * vj[t];
      }
    }
    matvec(attn_out.data(), layer.wo, proj.data());
    for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(j)] += proj[static_cast<size_t>(j)];

    rmsnorm_row(x.data(), layer.ffn_norm_w, h.data(), d);
    matvec(h.data(), layer.w1, ff.data());
    for (double& u : ff) u = u > 0.0 ? u : 0.0;
    matvec(ff.data(), layer.w2, proj.data());
    for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(j)] += proj[static_cast<size_t>(j)];
  }

  last_hidden_.assign(static_cast<size_t>(d), 0.0);
  rmsnorm_row(x.data(), p.final_norm_w, last_hidden_.data(), d);
  last_logits_.assign(static_cast<size_t>(spec_->config().vocab_size), 0.0);
  matvec(last_hidden_.data(), p.head, last_logits_.data());
  ids_.push_back(token_id);
}

EngineHandle::StepOutput EngineHandle::step() {
  if (finished_) {
    throw StateError("engine stepped after the stop token; the session is finished");
  }
  if (paused_) {
    throw StateError("engine stepped twice without resume");
  }
  if (pending_.empty()) {
    throw StateError("engine has no pending input to advance");
  }
  for (int tok : pending_) feed_token(tok);
  pending_.clear();
  paused_ = true;
  ++steps_taken_;
  return {last_hidden_, last_logits_};
}

void EngineHandle::resume(int token_id) {
  if (finished_) throw StateError("engine resumed after the stop token");
  if (!paused_) throw StateError("engine resumed without a paused step");
  if (token_id < 0 || token_id >= spec_->config().vocab_size) {
    throw VocabError("engine resumed with token id " + std::to_string(token_id) +
                     " outside the vocabulary");
  }
  paused_ = false;
  if (token_id == Tokenizer::kEos) {
    finished_ = true;
    return;
  }
  pending_.push_back(token_id);
}

std::vector<int> orchestrate(std::span<EngineHandle> engines, const GateNetwork& gate,
                             const GenerationConfig& config, const TokenSink& sink) {
  validate_generation_config(config);
  if (engines.empty()) throw ConfigError("orchestrate: no engines");
  const int s_count = static_cast<int>(engines.size());
  if (config.force_specialist &&
      (*config.force_specialist < 0 || *config.force_specialist >= s_count)) {
    throw ConfigError("force_specialist index out of range");
  }
  const int vocab = engines[0].specialist().config().vocab_size;
  for (const EngineHandle& e : engines) {
    if (e.specialist().config().vocab_size != vocab) {
      throw AlignmentError("engines disagree on vocabulary size; token ids would not align");
    }
    if (e.paused() || e.finished()) {
      throw StateError("orchestrate needs live, unpaused engines");
    }
    if (e.steps_taken() != engines[0].steps_taken()) {
      throw StateError("engines are not position-aligned");
    }
  }

  NoGradGuard guard;
  Rng rng(derive_seed(config.seed, "sample"));
  std::vector<int> selected;

  // Wraps engine faults with the offending engine's index so a stuck or
  // overrun session is attributable.
  auto attributed = [&](int idx, auto&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const LengthError& e) {
      throw LengthError("engine " + std::to_string(idx) + ": " + e.what());
    } catch (const StateError& e) {
      throw StateError("engine " + std::to_string(idx) + ": " + e.what());
    }
  };

  for (int t = 0; t < config.max_new_tokens; ++t) {
    bool capped = false;
    for (const EngineHandle& e : engines) {
      capped = capped || e.context_len() >= e.specialist().config().max_seq_len;
    }
    if (capped) break;

    // Barrier 1: step every engine to its paused decision point.
    std::vector<EngineHandle::StepOutput> outs;
    outs.reserve(static_cast<size_t>(s_count));
    for (int s = 0; s < s_count; ++s) {
      outs.push_back(attributed(s, [&] { return engines[static_cast<size_t>(s)].step(); }));
    }

    // Fuse the paused outputs.
    std::vector<double> weights(static_cast<size_t>(s_count), 0.0);
    if (config.force_specialist) {
      weights[static_cast<size_t>(*config.force_specialist)] = 1.0;
    } else {
      std::vector<Tensor> scores(static_cast<size_t>(s_count));
      for (int s = 0; s < s_count; ++s) {
        Tensor hidden = Tensor::from_values(
            {1, static_cast<int64_t>(outs[static_cast<size_t>(s)].hidden.size())},
            outs[static_cast<size_t>(s)].hidden);
        scores[static_cast<size_t>(s)] = gate.score(hidden);
      }
      Tensor w = fuse_weights(concat_scores(scores));
      weights.assign(w.values().begin(), w.values().end());
    }
    // Same mixing loop as the batched path: specialists outer, vocab inner.
    std::vector<double> fused(static_cast<size_t>(vocab), 0.0);
    for (int s = 0; s < s_count; ++s) {
      const double w = weights[static_cast<size_t>(s)];
      if (w == 0.0) continue;
      const auto& logits = outs[static_cast<size_t>(s)].logits;
      for (int j = 0; j < vocab; ++j) fused[static_cast<size_t>(j)] += w * logits[static_cast<size_t>(j)];
    }

    const int token = select_token(fused, config, rng);
    selected.push_back(token);
    if (sink) {
      StepTrace st;
      st.token_id = token;
      st.weights = weights;
      st.dominant_specialist = static_cast<int>(
          std::max_element(weights.begin(), weights.end()) - weights.begin());
      sink(token, st);
    }

    // Barrier 2: broadcast the decision.
    for (int s = 0; s < s_count; ++s) {
      attributed(s, [&] { engines[static_cast<size_t>(s)].resume(token); return 0; });
    }
    if (token == Tokenizer::kEos) break;
  }
  return selected;
}

GenerationResult generate_fused_cached(const FusedModel& model,
                                       std::string_view prompt,
                                       const GenerationConfig& config,
                                       const Tokenizer& tokenizer,
                                       const TokenSink& sink) {
  model.validate();
  std::vector<EngineHandle> engines;
  engines.reserve(static_cast<size_t>(model.num_specialists()));
  for (const Specialist& s : model.specialists) {
    engines.emplace_back(s, prompt, tokenizer);
  }
  std::vector<StepTrace> trace;
  TokenSink tee = [&](int token, const StepTrace& st) {
    trace.push_back(st);
    if (sink) sink(token, st);
  };
  std::vector<int> ids = orchestrate(engines, model.gate, config, tee);
  return finish_result(std::move(ids), std::move(trace), tokenizer);
}

}  // namespace fuselm
