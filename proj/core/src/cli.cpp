#include "fuselm/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fuselm/analysis.hpp"
#include "fuselm/bytes.hpp"
#include "fuselm/infer.hpp"
#include "fuselm/rng.hpp"

namespace fuselm {

using nlohmann::json;

namespace {

namespace fs = std::filesystem;

int log_level() {
  static const int level = [] {
    const char* env = std::getenv("FUSELM_LOG_LEVEL");
    if (!env || !*env) return 1;
    try {
      return std::stoi(env);
    } catch (...) {
      return 1;
    }
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[fuselm] " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[fuselm:debug] " << msg << "\n";
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) {
      throw ConfigError("unknown key '" + key + "' in " + where +
                        " (typo? defaults are silent otherwise)");
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("key '") + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model.vocab_size = Tokenizer().vocab_size();
  return c;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw ConfigError("run configuration is not a JSON object");
  }
  reject_unknown_keys(j, {"model", "data", "train", "seed", "out_dir"}, "config");
  RunConfig c = defaults();
  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown_keys(m,
                        {"d_model", "n_layers", "n_heads", "feedforward_mult",
                         "max_seq_len", "gate_hidden"},
                        "config.model");
    read_key(m, "d_model", c.model.d_model);
    read_key(m, "n_layers", c.model.n_layers);
    read_key(m, "n_heads", c.model.n_heads);
    read_key(m, "feedforward_mult", c.model.feedforward_mult);
    read_key(m, "max_seq_len", c.model.max_seq_len);
    read_key(m, "gate_hidden", c.gate_hidden);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown_keys(d, {"train_size", "heldout_size"}, "config.data");
    read_key(d, "train_size", c.train_size);
    read_key(d, "heldout_size", c.heldout_size);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown_keys(t,
                        {"n1_steps", "n2_steps", "lr1", "lr2", "per_domain_batch",
                         "beta1", "beta2", "eps", "weight_decay", "grad_clip",
                         "pretrain_steps", "pretrain_lr", "pretrain_batch",
                         "checkpoint_every"},
                        "config.train");
    read_key(t, "n1_steps", c.train.n1_steps);
    read_key(t, "n2_steps", c.train.n2_steps);
    read_key(t, "lr1", c.train.lr1);
    read_key(t, "lr2", c.train.lr2);
    read_key(t, "per_domain_batch", c.train.per_domain_batch);
    read_key(t, "beta1", c.train.beta1);
    read_key(t, "beta2", c.train.beta2);
    read_key(t, "eps", c.train.eps);
    read_key(t, "weight_decay", c.train.weight_decay);
    read_key(t, "grad_clip", c.train.grad_clip);
    read_key(t, "pretrain_steps", c.train.pretrain_steps);
    read_key(t, "pretrain_lr", c.train.pretrain_lr);
    read_key(t, "pretrain_batch", c.train.pretrain_batch);
    read_key(t, "checkpoint_every", c.train.checkpoint_every);
  }
  read_key(j, "seed", c.train.seed);
  read_key(j, "out_dir", c.out_dir);
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
  json j;
  j["model"] = {{"d_model", model.d_model},
                {"n_layers", model.n_layers},
                {"n_heads", model.n_heads},
                {"feedforward_mult", model.feedforward_mult},
                {"max_seq_len", model.max_seq_len},
                {"gate_hidden", gate_hidden}};
  j["data"] = {{"train_size", train_size}, {"heldout_size", heldout_size}};
  j["train"] = {{"n1_steps", train.n1_steps},
                {"n2_steps", train.n2_steps},
                {"lr1", train.lr1},
                {"lr2", train.lr2},
                {"per_domain_batch", train.per_domain_batch},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"eps", train.eps},
                {"weight_decay", train.weight_decay},
                {"grad_clip", train.grad_clip},
                {"pretrain_steps", train.pretrain_steps},
                {"pretrain_lr", train.pretrain_lr},
                {"pretrain_batch", train.pretrain_batch},
                {"checkpoint_every", train.checkpoint_every}};
  j["seed"] = train.seed;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

uint64_t RunConfig::content_hash() const { return fnv1a_str(to_json_text()); }

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (gate_hidden < 0) throw ConfigError("gate_hidden must be non-negative");
  if (train_size <= 0 || heldout_size <= 0) {
    throw ConfigError("corpus split sizes must be positive");
  }
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

// ---- command implementations -------------------------------------------------

namespace {

struct Paths {
  fs::path out;
  fs::path data() const { return out / "data"; }
  fs::path checkpoints() const { return out / "checkpoints"; }
  fs::path metrics() const { return out / "metrics"; }
  fs::path analysis() const { return out / "analysis"; }
  fs::path eval_dir() const { return out / "eval"; }
  fs::path specialist_ckpt(Domain d) const {
    return checkpoints() / ("specialist_" + std::string(domain_name(d)) + ".ckpt");
  }
  fs::path fused_ckpt(bool unbalanced) const {
    return checkpoints() / (unbalanced ? "fused_unbalanced.ckpt" : "fused.ckpt");
  }
};

// Record the exact resolved configuration next to the artifacts it produced.
void stamp_out_dir(const RunConfig& cfg, const Paths& paths) {
  fs::create_directories(paths.out);
  std::ofstream out(paths.out / "config.json", std::ios::binary | std::ios::trunc);
  out << cfg.to_json_text() << "\n";
}

std::vector<DomainCorpus> ensure_corpora(const RunConfig& cfg, const Paths& paths,
                                         bool force) {
  stamp_out_dir(cfg, paths);
  const fs::path manifest = paths.data() / "manifest.json";
  if (force || !fs::exists(manifest)) {
    log_info("generating corpora under " + paths.data().string());
    std::vector<DomainCorpus> corpora;
    for (Domain d : kAllDomains) {
      corpora.push_back(
          synth_corpus(d, cfg.train_size, cfg.heldout_size, cfg.train.seed));
    }
    save_corpora(paths.data(), corpora, cfg.train.seed);
    return corpora;
  }
  log_debug("loading corpora from " + paths.data().string());
  return load_corpora(paths.data());
}

std::string config_stamp(const RunConfig& cfg) {
  json j;
  j["kind"] = "run_config";
  j["hash"] = hex_u64(cfg.content_hash());
  j["seed"] = cfg.train.seed;
  return j.dump();
}

Specialist ensure_specialist(const RunConfig& cfg, const Paths& paths, Domain domain,
                             const std::vector<DomainCorpus>& corpora,
                             const Tokenizer& tokenizer, bool force) {
  const fs::path ckpt = paths.specialist_ckpt(domain);
  if (!force && fs::exists(ckpt)) {
    log_info("loading specialist '" + std::string(domain_name(domain)) + "' from " +
             ckpt.string());
    return load_specialist(ckpt, tokenizer);
  }
  const DomainCorpus* corpus = nullptr;
  for (const DomainCorpus& c : corpora) {
    if (c.domain == domain) corpus = &c;
  }
  if (!corpus) throw DomainError("no corpus for the requested domain");

  LmConfig mcfg = cfg.model;
  mcfg.vocab_size = tokenizer.vocab_size();
  const auto templates = builtin_templates();
  const PromptTemplate& tpl = templates[static_cast<size_t>(domain)];
  log_info("pretraining specialist '" + std::string(domain_name(domain)) + "' (" +
           std::to_string(cfg.train.pretrain_steps) + " steps)");
  MetricsLog log(paths.metrics() /
                 ("pretrain_" + std::string(domain_name(domain)) + ".jsonl"));
  log.append_json(config_stamp(cfg));
  Specialist spec =
      pretrain_specialist(*corpus, mcfg, tpl, cfg.train, tokenizer, &log);
  save_specialist(ckpt, spec);
  log_info("saved " + ckpt.string());
  return spec;
}

int cmd_prepare_data(const RunConfig& cfg, bool force) {
  Paths paths{cfg.out_dir};
  const fs::path manifest = paths.data() / "manifest.json";
  if (fs::exists(manifest) && !force) {
    std::cerr << "data already prepared at " << paths.data()
              << " (use --force to regenerate)\n";
    return kExitConfig;
  }
  auto corpora = ensure_corpora(cfg, paths, true);
  for (const DomainCorpus& c : corpora) {
    std::cout << domain_name(c.domain) << "\ttrain=" << c.train.size()
              << "\theldout=" << c.heldout.size() << "\n";
  }
  return kExitOk;
}

int cmd_train_specialist(const RunConfig& cfg, Domain domain, bool force) {
  Paths paths{cfg.out_dir};
  Tokenizer tokenizer;
  auto corpora = ensure_corpora(cfg, paths, false);
  Specialist spec = ensure_specialist(cfg, paths, domain, corpora, tokenizer, force);
  const DomainCorpus* corpus = nullptr;
  for (const DomainCorpus& c : corpora) {
    if (c.domain == domain) corpus = &c;
  }
  const double ppl = specialist_perplexity(spec, corpus->heldout, tokenizer).perplexity();
  std::cout << "specialist\t" << domain_name(domain) << "\theldout_perplexity\t"
            << ppl << "\n";
  return kExitOk;
}

int cmd_train_fused(const RunConfig& cfg, bool unbalanced, bool force) {
  Paths paths{cfg.out_dir};
  Tokenizer tokenizer;
  auto corpora = ensure_corpora(cfg, paths, false);

  const fs::path final_path = paths.fused_ckpt(unbalanced);
  if (fs::exists(final_path) && !force) {
    std::cerr << final_path.string() << " already exists (use --force to retrain)\n";
    return kExitConfig;
  }

  std::vector<Specialist> specialists;
  for (Domain d : kAllDomains) {
    specialists.push_back(
        ensure_specialist(cfg, paths, d, corpora, tokenizer, false));
  }
  GateNetwork gate = GateNetwork::init(cfg.model.d_model, cfg.gate_hidden_resolved(),
                                       derive_seed(cfg.train.seed, "gate-init"));
  FusedModel model = assemble_fused(std::move(specialists), std::move(gate));

  SamplerFn sampler = unbalanced ? make_pooled_sampler(corpora, cfg.train)
                                 : make_balanced_sampler(corpora, cfg.train);
  MetricsLog log(paths.metrics() /
                 (unbalanced ? "fused_unbalanced.jsonl" : "fused.jsonl"));
  log.append_json(config_stamp(cfg));

  const std::string suffix = unbalanced ? "_unbalanced" : "";
  StepHook hook;
  if (cfg.train.checkpoint_every > 0) {
    hook = [&](int stage, int64_t step, double) {
      if (stage == 2 && (step + 1) % cfg.train.checkpoint_every == 0) {
        const fs::path p = paths.checkpoints() /
                           ("fused" + suffix + "_step" + std::to_string(step + 1) + ".ckpt");
        save_fused(p, model);
        log_debug("checkpoint " + p.string());
      }
    };
  }

  log_info(std::string("fused stage 1 (gate only, ") +
           (unbalanced ? "pooled" : "balanced") + " batches, " +
           std::to_string(cfg.train.n1_steps) + " steps)");
  StageReport r1 = train_stage1(model, corpora, cfg.train, tokenizer, sampler, &log, hook);
  log_info("stage 1 loss " + std::to_string(r1.first_loss) + " -> " +
           std::to_string(r1.last_loss));
  log_info("fused stage 2 (joint, " + std::to_string(cfg.train.n2_steps) + " steps)");
  StageReport r2 = train_stage2(model, corpora, cfg.train, tokenizer, sampler, &log, hook);
  log_info("stage 2 loss " + std::to_string(r2.first_loss) + " -> " +
           std::to_string(r2.last_loss));

  save_fused(final_path, model);
  log_info("saved " + final_path.string());
  std::cout << "fused" << suffix << "\tstage1_last\t" << r1.last_loss
            << "\tstage2_last\t" << r2.last_loss << "\n";
  return kExitOk;
}

int cmd_generate(const RunConfig& cfg, const std::string& prompt,
                 const GenerationConfig& gen, std::optional<Domain> only_specialist,
                 bool trace) {
  Paths paths{cfg.out_dir};
  Tokenizer tokenizer;

  auto emit_trace = [&](const StepTrace& st) {
    json j;
    j["token_id"] = st.token_id;
    j["text"] = st.token_id == Tokenizer::kEos
                    ? std::string("<end>")
                    : std::string(1, tokenizer.id_char(st.token_id));
    j["weights"] = st.weights;
    j["dominant"] = st.dominant_specialist;
    std::cerr << j.dump() << "\n";
  };

  if (only_specialist) {
    Specialist spec = load_specialist(paths.specialist_ckpt(*only_specialist), tokenizer);
    GenerationResult r = generate_specialist(spec, prompt, gen, tokenizer);
    std::cout << r.text << "\n";
    if (trace) {
      for (const StepTrace& st : r.trace) emit_trace(st);
    }
    return kExitOk;
  }

  FusedModel model = load_fused(paths.fused_ckpt(false), tokenizer);
  // Streaming output: each fused decision is flushed as soon as the engines
  // pause on it.
  TokenSink sink = [&](int token, const StepTrace& st) {
    if (token != Tokenizer::kEos) {
      std::cout << tokenizer.id_char(token) << std::flush;
    }
    if (trace) emit_trace(st);
  };
  generate_fused_cached(model, prompt, gen, tokenizer, sink);
  std::cout << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg) {
  Paths paths{cfg.out_dir};
  Tokenizer tokenizer;
  auto corpora = ensure_corpora(cfg, paths, false);

  std::vector<Specialist> specialists;
  for (Domain d : kAllDomains) {
    specialists.push_back(load_specialist(paths.specialist_ckpt(d), tokenizer));
  }
  FusedModel fused = load_fused(paths.fused_ckpt(false), tokenizer);

  std::ostringstream table;
  table << "model";
  for (Domain d : kAllDomains) table << "\t" << domain_name(d) << "_ppl";
  table << "\n";
  std::vector<std::array<double, 3>> spec_ppl(specialists.size());
  for (size_t s = 0; s < specialists.size(); ++s) {
    table << "specialist_" << domain_name(specialists[s].domain());
    for (Domain d : kAllDomains) {
      const auto& held = corpora[static_cast<size_t>(d)].heldout;
      const double ppl = specialist_perplexity(specialists[s], held, tokenizer).perplexity();
      spec_ppl[s][static_cast<size_t>(d)] = ppl;
      table << "\t" << ppl;
    }
    table << "\n";
  }
  table << "fused";
  std::array<double, 3> fused_ppl{};
  for (Domain d : kAllDomains) {
    const auto& held = corpora[static_cast<size_t>(d)].heldout;
    fused_ppl[static_cast<size_t>(d)] =
        fused_perplexity(fused, held, tokenizer).perplexity();
    table << "\t" << fused_ppl[static_cast<size_t>(d)];
  }
  table << "\n";
  for (Domain d : kAllDomains) {
    const size_t di = static_cast<size_t>(d);
    double best = spec_ppl[0][di];
    for (size_t s = 1; s < spec_ppl.size(); ++s) best = std::min(best, spec_ppl[s][di]);
    table << "fused_vs_best_" << domain_name(d) << "\t" << (fused_ppl[di] / best)
          << "\n";
  }

  const std::string text = table.str();
  std::cout << text;
  fs::create_directories(paths.eval_dir());
  std::ofstream out(paths.eval_dir() / "eval.tsv", std::ios::binary | std::ios::trunc);
  out << "# config " << hex_u64(cfg.content_hash()) << "\n" << text;
  return kExitOk;
}

int cmd_analyze(const RunConfig& cfg) {
  Paths paths{cfg.out_dir};
  Tokenizer tokenizer;
  auto corpora = ensure_corpora(cfg, paths, false);
  FusedModel model = load_fused(paths.fused_ckpt(false), tokenizer);

  std::vector<TrainingExample> examples;
  for (const DomainCorpus& c : corpora) {
    examples.insert(examples.end(), c.heldout.begin(), c.heldout.end());
  }
  log_info("recording fusion weights over " + std::to_string(examples.size()) +
           " held-out examples");
  const auto records = record_weights(model, examples, tokenizer);
  const auto domains = model.domains();
  const WeightMatrix matrix = average_weights(records, domains);

  export_records_tsv(paths.analysis() / "records.tsv", records);
  export_matrix_tsv(paths.analysis() / "weight_matrix.tsv", matrix, domains);
  export_heatmap_svg(paths.analysis() / "heatmap.svg", records, domains);

  std::vector<TrainingExample> cases;
  for (const DomainCorpus& c : corpora) {
    for (size_t i = 0; i < 2 && i < c.heldout.size(); ++i) cases.push_back(c.heldout[i]);
  }
  {
    std::ofstream out(paths.analysis() / "token_cases.txt",
                      std::ios::binary | std::ios::trunc);
    out << token_case_report(model, cases, tokenizer);
  }

  std::cout << "specialist";
  for (Domain d : kAllDomains) std::cout << "\t" << domain_name(d) << "_data";
  std::cout << "\n";
  for (int s = 0; s < matrix.num_specialists; ++s) {
    std::cout << domain_name(domains[static_cast<size_t>(s)]);
    for (size_t d = 0; d < 3; ++d) std::cout << "\t" << matrix.mean[static_cast<size_t>(s)][d];
    std::cout << "\n";
  }
  for (size_t d = 0; d < 3; ++d) {
    std::cout << "dominant_" << domain_name(kAllDomains[d]) << "\t"
              << domain_name(domains[static_cast<size_t>(matrix.dominant[d])])
              << (matrix.diagonal_dominant[d] ? "\t(diagonal)" : "\t(off-diagonal)")
              << "\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Token-level fusion of domain-specialist character language models"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<uint64_t> seed_flag;
  std::optional<std::string> out_flag;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration file");
    cmd->add_option("--seed", seed_flag, "override the run seed");
    cmd->add_option("--out", out_flag, "override the output directory");
  };

  auto* prepare = app.add_subcommand("prepare-data", "generate the synthetic corpora");
  bool prepare_force = false;
  add_common(prepare);
  prepare->add_flag("--force", prepare_force, "regenerate even if data exists");

  auto* train_spec = app.add_subcommand("train-specialist", "pretrain one domain specialist");
  std::string spec_domain;
  bool spec_force = false;
  add_common(train_spec);
  train_spec->add_option("--domain", spec_domain, "text | code | math")->required();
  train_spec->add_flag("--force", spec_force, "retrain even if a checkpoint exists");

  auto* train_fused_cmd = app.add_subcommand("train-fused", "two-stage fused training");
  bool fused_unbalanced = false, fused_force = false;
  add_common(train_fused_cmd);
  train_fused_cmd->add_flag("--unbalanced", fused_unbalanced,
                            "use the pooled (unbalanced) batch stream");
  train_fused_cmd->add_flag("--force", fused_force, "retrain even if a checkpoint exists");

  auto* generate = app.add_subcommand("generate", "decode from the fused model");
  std::string gen_prompt, gen_specialist;
  int gen_max_new = 64;
  double gen_temperature = 0.0;
  bool gen_trace = false;
  add_common(generate);
  generate->add_option("--prompt", gen_prompt, "prompt text")->required();
  generate->add_option("--max-new-tokens", gen_max_new, "generation budget");
  generate->add_option("--temperature", gen_temperature, "0 = greedy");
  generate->add_option("--specialist", gen_specialist,
                       "decode from one specialist instead of the fused model");
  generate->add_flag("--trace", gen_trace, "emit per-token fusion weights on stderr");

  auto* eval = app.add_subcommand("eval", "held-out perplexity table");
  add_common(eval);

  auto* analyze = app.add_subcommand("analyze", "export fusion-weight analysis");
  add_common(analyze);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig::defaults()
                                        : RunConfig::from_file(config_path);
    if (seed_flag) cfg.train.seed = *seed_flag;
    if (out_flag) cfg.out_dir = *out_flag;
    cfg.validate();
    log_info("config " + hex_u64(cfg.content_hash()) + " seed " +
             std::to_string(cfg.train.seed));
    log_debug(cfg.to_json_text());

    if (prepare->parsed()) return cmd_prepare_data(cfg, prepare_force);
    if (train_spec->parsed()) {
      return cmd_train_specialist(cfg, domain_from_name(spec_domain), spec_force);
    }
    if (train_fused_cmd->parsed()) {
      return cmd_train_fused(cfg, fused_unbalanced, fused_force);
    }
    if (generate->parsed()) {
      GenerationConfig gen;
      gen.max_new_tokens = gen_max_new;
      gen.temperature = gen_temperature;
      gen.seed = seed_flag.value_or(cfg.train.seed);
      std::optional<Domain> only;
      if (!gen_specialist.empty()) only = domain_from_name(gen_specialist);
      return cmd_generate(cfg, gen_prompt, gen, only, gen_trace);
    }
    if (eval->parsed()) return cmd_eval(cfg);
    if (analyze->parsed()) return cmd_analyze(cfg);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged at step " << e.step() << ": " << e.what() << "\n";
    return kExitDivergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    // Data-shaped problems: vocabulary, domains, alignment, sampling, length.
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace fuselm
