#include "fuselm/fuser.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "fuselm/checkpoint.hpp"
#include "lm_internal.hpp"

namespace fuselm {

using nlohmann::json;

std::vector<PromptTemplate> FusedModel::templates() const {
  std::vector<PromptTemplate> out;
  out.reserve(specialists.size());
  for (const Specialist& s : specialists) out.push_back(s.prompt_template());
  return out;
}

std::vector<Domain> FusedModel::domains() const {
  std::vector<Domain> out;
  out.reserve(specialists.size());
  for (const Specialist& s : specialists) out.push_back(s.domain());
  return out;
}

void FusedModel::validate() const {
  if (specialists.empty()) throw ConfigError("fused model needs at least one specialist");
  const LmConfig& ref = specialists.front().config();
  for (const Specialist& s : specialists) {
    if (!(s.config() == ref)) {
      throw ConfigError("specialists disagree on model configuration; fusion "
                        "requires a shared vocabulary and width");
    }
  }
  if (!gate.w1.defined() || gate.w1.dim(0) != ref.d_model) {
    throw ConfigError("gate input width does not match the specialists' d_model");
  }
}

ParamRefs FusedModel::gate_params() const {
  ParamRefs out;
  for (const NamedParam& p : gate.named_params()) {
    out.push_back({"gate." + p.name, p.tensor});
  }
  return out;
}

ParamRefs FusedModel::specialist_params() const {
  ParamRefs out;
  for (const Specialist& s : specialists) {
    const std::string prefix = "specialist." + std::string(domain_name(s.domain())) + ".";
    for (const NamedParam& p : s.named_params()) {
      out.push_back({prefix + p.name, p.tensor});
    }
  }
  return out;
}

ParamRefs FusedModel::named_params() const {
  ParamRefs out = gate_params();
  ParamRefs rest = specialist_params();
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

FusedModel assemble_fused(std::vector<Specialist> specialists, GateNetwork gate) {
  FusedModel m{std::move(specialists), std::move(gate)};
  m.validate();
  return m;
}

FusedForward fused_forward(const FusedModel& model, const WrappedExample& ex,
                           FuseMode mode, std::optional<int> force_specialist) {
  model.validate();
  const int s_count = model.num_specialists();
  if (ex.num_streams() != s_count) {
    throw AlignmentError("example wrapped for " + std::to_string(ex.num_streams()) +
                         " streams, model fuses " + std::to_string(s_count));
  }
  if (ex.response_len <= 0) throw AlignmentError("example has an empty response span");
  if (force_specialist && (*force_specialist < 0 || *force_specialist >= s_count)) {
    throw ConfigError("force_specialist index out of range");
  }

  // Optional outer guard for pure inference.
  std::optional<NoGradGuard> inference_guard;
  if (mode == FuseMode::kInference) inference_guard.emplace();

  FusedForward out;
  std::vector<Tensor> hidden_rows(static_cast<size_t>(s_count));
  out.specialist_logits.resize(static_cast<size_t>(s_count));
  for (int s = 0; s < s_count; ++s) {
    // Rows start-1 .. start+R-2 of stream s predict response tokens 0..R-1;
    // gathering per stream aligns every specialist onto that shared frame.
    std::vector<int> rows(static_cast<size_t>(ex.response_len));
    for (int r = 0; r < ex.response_len; ++r) {
      rows[static_cast<size_t>(r)] = ex.response_start[static_cast<size_t>(s)] - 1 + r;
    }
    // In gate-only mode the specialist pass (including its head) runs off
    // the tape: the gate trains against frozen features and frozen logits.
    std::optional<NoGradGuard> freeze;
    if (mode == FuseMode::kGateOnly) freeze.emplace();
    const Specialist& spec = model.specialists[static_cast<size_t>(s)];
    Tensor hidden = spec.forward_hidden(ex.tokens[static_cast<size_t>(s)]);
    hidden_rows[static_cast<size_t>(s)] = embedding_lookup(hidden, rows);
    out.specialist_logits[static_cast<size_t>(s)] =
        matmul(hidden_rows[static_cast<size_t>(s)], spec.params().head);
  }

  if (force_specialist) {
    // Exact one-hot mixture, bypassing the gate entirely.
    std::vector<double> w(static_cast<size_t>(ex.response_len) * s_count, 0.0);
    for (int r = 0; r < ex.response_len; ++r) {
      w[static_cast<size_t>(r) * s_count + static_cast<size_t>(*force_specialist)] = 1.0;
    }
    out.weights = Tensor::from_values({ex.response_len, s_count}, std::move(w));
  } else {
    std::vector<Tensor> scores(static_cast<size_t>(s_count));
    for (int s = 0; s < s_count; ++s) {
      scores[static_cast<size_t>(s)] = model.gate.score(hidden_rows[static_cast<size_t>(s)]);
    }
    out.weights = fuse_weights(concat_scores(scores));
  }
  out.fused_logits = fuse_logits(out.weights, out.specialist_logits);

  const auto resp = ex.response_ids(0);
  out.targets.assign(resp.begin(), resp.end());
  return out;
}

Tensor fused_response_loss(const FusedModel& model, const WrappedExample& ex,
                           FuseMode mode) {
  FusedForward f = fused_forward(model, ex, mode);
  const std::vector<uint8_t> mask(f.targets.size(), 1);
  return cross_entropy(f.fused_logits, f.targets, mask);
}

PerplexityResult fused_perplexity(const FusedModel& model,
                                  std::span<const TrainingExample> examples,
                                  const Tokenizer& tokenizer) {
  NoGradGuard guard;
  PerplexityResult result;
  const auto templates = model.templates();
  for (const TrainingExample& ex : examples) {
    WrappedExample w = wrap_example(ex, templates, tokenizer, model.config().max_seq_len);
    const double mean = fused_response_loss(model, w, FuseMode::kInference).scalar_value();
    result.nll_sum += mean * w.response_len;
    result.token_count += w.response_len;
  }
  if (result.token_count == 0) throw EmptyLossError("perplexity over zero tokens");
  return result;
}

// ---- checkpoint glue --------------------------------------------------------

namespace detail_lm {

json fused_meta(const FusedModel& model) {
  json meta;
  meta["kind"] = "fused";
  json specs = json::array();
  for (const Specialist& s : model.specialists) {
    specs.push_back(specialist_meta(s));
  }
  meta["specialists"] = specs;
  meta["gate"] = {{"d_model", model.gate.d_model()},
                  {"d_hidden", model.gate.d_hidden()}};
  return meta;
}

std::vector<std::pair<std::string, Tensor>> fused_tensors(const FusedModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const NamedParam& p : model.named_params()) {
    out.emplace_back(p.name, p.tensor);
  }
  return out;
}

FusedModel fused_from_parts(const json& meta,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            size_t first, size_t* consumed, const Tokenizer& tokenizer) {
  const int d_model = meta.at("gate").at("d_model").get<int>();
  const int d_hidden = meta.at("gate").at("d_hidden").get<int>();
  GateNetwork gate = GateNetwork::init(d_model, d_hidden, 0);
  ParamRefs gate_refs = gate.named_params();
  size_t offset = first;
  if (tensors.size() < offset + gate_refs.size()) {
    throw IoError("truncated fused container");
  }
  for (size_t i = 0; i < gate_refs.size(); ++i, ++offset) {
    const auto& [name, tensor] = tensors[offset];
    if (name != "gate." + gate_refs[i].name) {
      throw IoError("fused checkpoint tensor '" + name + "' where 'gate." +
                    gate_refs[i].name + "' was expected");
    }
    if (tensor.shape() != gate_refs[i].tensor.shape()) {
      throw IoError("gate tensor '" + name + "' has unexpected shape " +
                    shape_str(tensor.shape()));
    }
    auto dst = gate_refs[i].tensor.mutable_values();
    auto src = tensor.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }

  std::vector<Specialist> specialists;
  for (const json& smeta : meta.at("specialists")) {
    const std::string prefix =
        "specialist." + smeta.at("domain").get<std::string>() + ".";
    // Embeddings + final norm + head, plus eight tensors per layer.
    const size_t count = 4 + 8 * smeta.at("model").at("n_layers").get<size_t>();
    specialists.push_back(specialist_from_parts(smeta, tensors, offset, count,
                                                tokenizer, prefix));
    offset += count;
  }
  if (consumed) *consumed = offset - first;
  return assemble_fused(std::move(specialists), std::move(gate));
}

}  // namespace detail_lm

void save_fused(const std::filesystem::path& path, const FusedModel& model) {
  model.validate();
  Container c;
  c.meta_json = detail_lm::fused_meta(model).dump();
  c.tensors = detail_lm::fused_tensors(model);
  save_container(path, c);
}

FusedModel load_fused(const std::filesystem::path& path, const Tokenizer& tokenizer) {
  Container c = load_container(path);
  json meta = json::parse(c.meta_json, nullptr, false);
  if (meta.is_discarded()) throw IoError("bad metadata in " + path.string());
  if (meta.value("kind", "") != "fused") {
    throw IoError(path.string() + " does not hold a fused model");
  }
  size_t consumed = 0;
  FusedModel model = detail_lm::fused_from_parts(meta, c.tensors, 0, &consumed, tokenizer);
  if (consumed != c.tensors.size()) {
    throw IoError("fused container holds " + std::to_string(c.tensors.size()) +
                  " tensors, expected " + std::to_string(consumed));
  }
  return model;
}

}  // namespace fuselm
