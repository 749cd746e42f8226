#include "fuselm/lm.hpp"

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fuselm/checkpoint.hpp"
#include "fuselm/rng.hpp"
#include "lm_internal.hpp"

namespace fuselm {

using nlohmann::json;

void LmConfig::validate() const {
  if (vocab_size < 3) throw ConfigError("vocab_size must cover markers plus an alphabet");
  if (d_model <= 0) throw ConfigError("d_model must be positive");
  if (n_layers <= 0) throw ConfigError("n_layers must be positive");
  if (n_heads <= 0 || d_model % n_heads != 0) {
    throw ConfigError("n_heads must divide d_model (" + std::to_string(d_model) +
                      " % " + std::to_string(n_heads) + " != 0)");
  }
  if (feedforward_mult <= 0) throw ConfigError("feedforward_mult must be positive");
  if (max_seq_len <= 1) throw ConfigError("max_seq_len must exceed 1");
}

Specialist Specialist::init(const LmConfig& config, Domain domain,
                            PromptTemplate prompt_template, uint64_t seed) {
  config.validate();
  Specialist s;
  s.config_ = config;
  s.domain_ = domain;
  s.template_ = std::move(prompt_template);

  Rng rng(derive_seed(seed, std::string("specialist/") + std::string(domain_name(domain))));
  const int64_t v = config.vocab_size, d = config.d_model, ff = config.d_ff();
  const double base_std = 0.02;
  // Residual-output projections are damped by depth so the initial residual
  // stream keeps unit-order scale regardless of layer count.
  const double out_std = base_std / std::sqrt(2.0 * config.n_layers);

  s.params_.tok_emb = Tensor::randn({v, d}, rng, base_std, true);
  s.params_.pos_emb = Tensor::randn({config.max_seq_len, d}, rng, base_std, true);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams layer;
    layer.attn_norm_w = Tensor::full({d}, 1.0, true);
    layer.wq = Tensor::randn({d, d}, rng, base_std, true);
    layer.wk = Tensor::randn({d, d}, rng, base_std, true);
    layer.wv = Tensor::randn({d, d}, rng, base_std, true);
    layer.wo = Tensor::randn({d, d}, rng, out_std, true);
    layer.ffn_norm_w = Tensor::full({d}, 1.0, true);
    layer.w1 = Tensor::randn({d, ff}, rng, base_std, true);
    layer.w2 = Tensor::randn({ff, d}, rng, out_std, true);
    s.params_.layers.push_back(std::move(layer));
  }
  s.params_.final_norm_w = Tensor::full({d}, 1.0, true);
  // Zero head: an untrained model scores every token equally, so its loss is
  // exactly log(vocab) and fused mixtures start from a clean slate.
  s.params_.head = Tensor::zeros({d, v}, true);
  return s;
}

ParamRefs Specialist::named_params() const {
  ParamRefs out;
  out.push_back({"tok_emb", params_.tok_emb});
  out.push_back({"pos_emb", params_.pos_emb});
  for (size_t l = 0; l < params_.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const LayerParams& lp = params_.layers[l];
    out.push_back({p + "attn_norm.w", lp.attn_norm_w});
    out.push_back({p + "attn.wq", lp.wq});
    out.push_back({p + "attn.wk", lp.wk});
    out.push_back({p + "attn.wv", lp.wv});
    out.push_back({p + "attn.wo", lp.wo});
    out.push_back({p + "ffn_norm.w", lp.ffn_norm_w});
    out.push_back({p + "ffn.w1", lp.w1});
    out.push_back({p + "ffn.w2", lp.w2});
  }
  out.push_back({"final_norm.w", params_.final_norm_w});
  out.push_back({"head", params_.head});
  return out;
}

int64_t Specialist::param_count() const {
  int64_t n = 0;
  for (const NamedParam& p : named_params()) n += p.tensor.numel();
  return n;
}

Tensor Specialist::forward_hidden(std::span<const int> tokens) const {
  if (tokens.empty()) throw DimensionError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > config_.max_seq_len) {
    throw LengthError("forward: sequence of " + std::to_string(tokens.size()) +
                      " tokens exceeds the context window of " +
                      std::to_string(config_.max_seq_len));
  }
  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);

  Tensor x = add(embedding_lookup(params_.tok_emb, tokens),
                 embedding_lookup(params_.pos_emb, positions));
  for (const LayerParams& layer : params_.layers) {
    Tensor h = rmsnorm(x, layer.attn_norm_w);
    Tensor attn = causal_self_attention(matmul(h, layer.wq), matmul(h, layer.wk),
                                        matmul(h, layer.wv), config_.n_heads);
    x = add(x, matmul(attn, layer.wo));
    Tensor h2 = rmsnorm(x, layer.ffn_norm_w);
    x = add(x, matmul(relu(matmul(h2, layer.w1)), layer.w2));
  }
  return rmsnorm(x, params_.final_norm_w);
}

SpecialistOutput Specialist::forward(std::span<const int> tokens) const {
  SpecialistOutput out;
  out.hidden = forward_hidden(tokens);
  out.logits = matmul(out.hidden, params_.head);
  return out;
}

Tensor Specialist::logits_at(const Tensor& hidden, std::span<const int> rows) const {
  return matmul(embedding_lookup(hidden, rows), params_.head);
}

double response_nll(const Specialist& spec, const TrainingExample& ex,
                    const Tokenizer& tokenizer) {
  NoGradGuard guard;
  const PromptTemplate tpl[] = {spec.prompt_template()};
  WrappedExample w = wrap_example(ex, tpl, tokenizer, spec.config().max_seq_len);
  const std::vector<int>& ids = w.tokens[0];
  SpecialistOutput out = spec.forward(ids);
  // Row i of the logits predicts token i+1; rows covering the response are
  // [start-1, start+R-2].
  std::vector<int> targets(ids.size(), 0);
  std::vector<uint8_t> mask(ids.size(), 0);
  for (int r = 0; r < w.response_len; ++r) {
    const int row = w.response_start[0] - 1 + r;
    targets[static_cast<size_t>(row)] = ids[static_cast<size_t>(row + 1)];
    mask[static_cast<size_t>(row)] = 1;
  }
  return cross_entropy(out.logits, targets, mask).scalar_value();
}

double PerplexityResult::perplexity() const {
  if (token_count == 0) throw EmptyLossError("perplexity over zero tokens");
  return std::exp(mean_nll());
}

PerplexityResult specialist_perplexity(const Specialist& spec,
                                       std::span<const TrainingExample> examples,
                                       const Tokenizer& tokenizer) {
  NoGradGuard guard;
  PerplexityResult result;
  const PromptTemplate tpl[] = {spec.prompt_template()};
  for (const TrainingExample& ex : examples) {
    WrappedExample w = wrap_example(ex, tpl, tokenizer, spec.config().max_seq_len);
    const std::vector<int>& ids = w.tokens[0];
    SpecialistOutput out = spec.forward(ids);
    std::vector<int> targets(ids.size(), 0);
    std::vector<uint8_t> mask(ids.size(), 0);
    for (int r = 0; r < w.response_len; ++r) {
      const int row = w.response_start[0] - 1 + r;
      targets[static_cast<size_t>(row)] = ids[static_cast<size_t>(row + 1)];
      mask[static_cast<size_t>(row)] = 1;
    }
    const double mean = cross_entropy(out.logits, targets, mask).scalar_value();
    result.nll_sum += mean * w.response_len;
    result.token_count += w.response_len;
  }
  if (result.token_count == 0) throw EmptyLossError("perplexity over zero tokens");
  return result;
}

// ---- checkpoint glue --------------------------------------------------------

namespace {

json template_to_json(const PromptTemplate& tpl) {
  json j;
  j["prefix"] = tpl.prefix;
  j["infix"] = tpl.infix;
  j["suffix"] = tpl.suffix;
  return j;
}

PromptTemplate template_from_json(const json& j) {
  return {j.at("prefix").get<std::string>(), j.at("infix").get<std::string>(),
          j.at("suffix").get<std::string>()};
}

json config_to_json(const LmConfig& c) {
  json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["feedforward_mult"] = c.feedforward_mult;
  j["max_seq_len"] = c.max_seq_len;
  return j;
}

LmConfig config_from_json(const json& j) {
  LmConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.feedforward_mult = j.at("feedforward_mult").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  return c;
}

}  // namespace

namespace detail_lm {

json specialist_meta(const Specialist& spec) {
  json j;
  j["kind"] = "specialist";
  j["domain"] = std::string(domain_name(spec.domain()));
  j["model"] = config_to_json(spec.config());
  j["template"] = template_to_json(spec.prompt_template());
  return j;
}

Specialist specialist_from_parts(const json& meta,
                                 const std::vector<std::pair<std::string, Tensor>>& tensors,
                                 size_t first, size_t count, const Tokenizer& tokenizer,
                                 const std::string& name_prefix) {
  const LmConfig config = config_from_json(meta.at("model"));
  if (config.vocab_size != tokenizer.vocab_size()) {
    throw VocabError("checkpoint vocabulary size " + std::to_string(config.vocab_size) +
                     " does not match the tokenizer's " +
                     std::to_string(tokenizer.vocab_size()));
  }
  Specialist spec = Specialist::init(config, domain_from_name(meta.at("domain").get<std::string>()),
                                     template_from_json(meta.at("template")), 0);
  ParamRefs refs = spec.named_params();
  if (count != refs.size()) {
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                  std::to_string(refs.size()));
  }
  for (size_t i = 0; i < refs.size(); ++i) {
    const auto& [name, tensor] = tensors[first + i];
    if (name != name_prefix + refs[i].name) {
      throw IoError("checkpoint tensor '" + name + "' where '" + name_prefix +
                    refs[i].name + "' was expected");
    }
    if (tensor.shape() != refs[i].tensor.shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " +
                    shape_str(tensor.shape()) + ", model expects " +
                    shape_str(refs[i].tensor.shape()));
    }
    auto dst = refs[i].tensor.mutable_values();
    auto src = tensor.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return spec;
}

}  // namespace detail_lm

void save_specialist(const std::filesystem::path& path, const Specialist& spec) {
  Container c;
  c.meta_json = detail_lm::specialist_meta(spec).dump();
  for (const NamedParam& p : spec.named_params()) {
    c.tensors.emplace_back(p.name, p.tensor);
  }
  save_container(path, c);
}

Specialist load_specialist(const std::filesystem::path& path,
                           const Tokenizer& tokenizer) {
  Container c = load_container(path);
  json meta = json::parse(c.meta_json, nullptr, false);
  if (meta.is_discarded()) throw IoError("bad metadata in " + path.string());
  if (meta.value("kind", "") != "specialist") {
    throw IoError(path.string() + " does not hold a single specialist");
  }
  return detail_lm::specialist_from_parts(meta, c.tensors, 0, c.tensors.size(),
                                          tokenizer, "");
}

}  // namespace fuselm
