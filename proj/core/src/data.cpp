#include "fuselm/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fuselm/bytes.hpp"
#include "fuselm/error.hpp"
#include "fuselm/rng.hpp"

namespace fuselm {

using nlohmann::json;

std::string hex_u64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::string_view domain_name(Domain d) {
  switch (d) {
    case Domain::kText: return "text";
    case Domain::kCode: return "code";
    case Domain::kMath: return "math";
  }
  throw DomainError("invalid domain value");
}

Domain domain_from_name(std::string_view name) {
  if (name == "text") return Domain::kText;
  if (name == "code") return Domain::kCode;
  if (name == "math") return Domain::kMath;
  throw DomainError("unknown domain '" + std::string(name) + "'");
}

std::string PromptTemplate::render(std::string_view prompt,
                                   std::string_view response) const {
  std::string out;
  out.reserve(prefix.size() + prompt.size() + infix.size() + response.size() +
              suffix.size());
  out += prefix;
  out += prompt;
  out += infix;
  out += response;
  out += suffix;
  return out;
}

std::array<PromptTemplate, 3> builtin_templates() {
  return {
      PromptTemplate{"User: ", "\nAssistant: ", ""},
      PromptTemplate{"[INST] ", " [/INST] ", ""},
      PromptTemplate{"### Instruction:\n", "\n### Response:\n", ""},
  };
}

// ---- synthetic corpora -----------------------------------------------------

namespace {

const char* kNouns[] = {"river",  "stone",  "garden",  "cloud",  "winter", "market",
                        "violin", "harbor", "meadow",  "lantern", "forest", "window",
                        "mountain", "sparrow", "village", "candle"};
const char* kVerbs[] = {"flows", "rests", "shines",  "waits", "sings",   "drifts",
                        "gathers", "fades", "rises", "leans", "wanders", "sleeps"};
const char* kAdjectives[] = {"calm", "bright", "quiet",  "golden", "distant", "gentle",
                             "pale", "warm",   "small",  "silver", "weary",   "deep"};
const char* kTails[] = {"",          "at dusk",  "in the rain", "by the sea",
                        "all night", "once more", "in spring",  "for now"};

const char* kFnNames[] = {"f",    "g",    "h",   "calc", "step",
                          "twist", "bump", "fold", "mix",  "jump"};

template <size_t N>
const char* pick(const char* (&arr)[N], Rng& rng) {
  return arr[static_cast<size_t>(rng.next_int(0, static_cast<int64_t>(N) - 1))];
}

TrainingExample gen_text(Rng& rng) {
  const char* noun = pick(kNouns, rng);
  const bool long_form = rng.next_double() < 0.3;
  std::string prompt = long_form ? std::string("Write about the ") + noun
                                 : std::string("Topic: ") + noun;
  std::string response = std::string("the ") + pick(kAdjectives, rng) + " " + noun +
                         " " + pick(kVerbs, rng);
  const char* tail = pick(kTails, rng);
  if (*tail) {
    response += " ";
    response += tail;
  }
  response += ".";
  return {Domain::kText, std::move(prompt), std::move(response)};
}

TrainingExample gen_code(Rng& rng) {
  const char* name = pick(kFnNames, rng);
  const int op = static_cast<int>(rng.next_int(0, 2));
  const char* op_word = op == 0 ? "add" : op == 1 ? "sub" : "mul";
  const char op_sym = op == 0 ? '+' : op == 1 ? '-' : '*';
  const long long k = rng.next_int(2, 99);
  std::string prompt = std::string("write ") + name + ": " + op_word + " " +
                       std::to_string(k);
  std::string response;
  if (rng.next_double() < 0.5) {
    response = std::string("def ") + name + "(x):\n  return x " + op_sym + " " +
               std::to_string(k);
  } else {
    response = std::string("def ") + name + "(x):\n  y = x " + op_sym + " " +
               std::to_string(k) + "\n  return y";
  }
  return {Domain::kCode, std::move(prompt), std::move(response)};
}

TrainingExample gen_math(Rng& rng) {
  const double form = rng.next_double();
  long long a, b, c, result;
  std::string expr;
  if (form < 0.40) {
    a = rng.next_int(2, 99);
    b = rng.next_int(2, 99);
    result = a + b;
    expr = std::to_string(a) + "+" + std::to_string(b);
  } else if (form < 0.65) {
    a = rng.next_int(2, 99);
    b = rng.next_int(2, 99);
    result = a - b;
    expr = std::to_string(a) + "-" + std::to_string(b);
  } else if (form < 0.85) {
    a = rng.next_int(2, 99);
    b = rng.next_int(2, 12);
    result = a * b;
    expr = std::to_string(a) + "*" + std::to_string(b);
  } else {
    a = rng.next_int(2, 99);
    b = rng.next_int(2, 20);
    c = rng.next_int(2, 9);
    result = a + b * c;
    expr = std::to_string(a) + "+" + std::to_string(b) + "*" + std::to_string(c);
  }
  return {Domain::kMath, "Compute: " + expr, expr + "=" + std::to_string(result)};
}

TrainingExample gen_example(Domain d, Rng& rng) {
  switch (d) {
    case Domain::kText: return gen_text(rng);
    case Domain::kCode: return gen_code(rng);
    case Domain::kMath: return gen_math(rng);
  }
  throw DomainError("invalid domain value");
}

}  // namespace

DomainCorpus synth_corpus(Domain domain, int train_size, int heldout_size,
                          uint64_t seed) {
  if (train_size < 0 || heldout_size < 0) {
    throw ConfigError("synth_corpus: negative split size");
  }
  Rng rng(derive_seed(derive_seed(seed, "corpus"), domain_name(domain)));
  // De-duplicate on the full rendered pair so the two splits are disjoint and
  // memorization of literal duplicates cannot blur the held-out evaluation.
  std::set<std::string> seen;
  std::vector<TrainingExample> all;
  const int total = train_size + heldout_size;
  all.reserve(static_cast<size_t>(total));
  int attempts = 0;
  const int max_attempts = total * 200 + 1000;
  while (static_cast<int>(all.size()) < total) {
    if (++attempts > max_attempts) {
      throw SamplerError("synth_corpus: generator space too small for " +
                         std::to_string(total) + " distinct examples");
    }
    TrainingExample ex = gen_example(domain, rng);
    std::string key = ex.prompt + "\x1f" + ex.response;
    if (seen.insert(std::move(key)).second) all.push_back(std::move(ex));
  }
  DomainCorpus corpus;
  corpus.domain = domain;
  corpus.train.assign(all.begin(), all.begin() + train_size);
  corpus.heldout.assign(all.begin() + train_size, all.end());
  return corpus;
}

// ---- arithmetic oracle -----------------------------------------------------

namespace {

struct ExprParser {
  std::string_view s;
  size_t pos = 0;

  char peek() const { return pos < s.size() ? s[pos] : '\0'; }

  long long parse_number() {
    bool neg = false;
    if (peek() == '-') {
      neg = true;
      ++pos;
    }
    if (!std::isdigit(static_cast<unsigned char>(peek()))) {
      throw NumericError("arithmetic: expected digit at offset " +
                         std::to_string(pos) + " in '" + std::string(s) + "'");
    }
    long long v = 0;
    while (std::isdigit(static_cast<unsigned char>(peek()))) {
      v = v * 10 + (s[pos] - '0');
      ++pos;
    }
    return neg ? -v : v;
  }

  long long parse_term() {
    long long v = parse_number();
    while (peek() == '*') {
      ++pos;
      v *= parse_number();
    }
    return v;
  }

  long long parse_expr() {
    long long v = parse_term();
    while (peek() == '+' || peek() == '-') {
      const char op = s[pos];
      ++pos;
      const long long rhs = parse_term();
      v = op == '+' ? v + rhs : v - rhs;
    }
    return v;
  }
};

}  // namespace

long long eval_arithmetic(std::string_view expr) {
  ExprParser p{expr};
  long long v = p.parse_expr();
  if (p.pos != expr.size()) {
    throw NumericError("arithmetic: trailing characters in '" + std::string(expr) +
                       "'");
  }
  return v;
}

// ---- n-gram overlap --------------------------------------------------------

double shared_ngram_fraction(std::span<const TrainingExample> a,
                             std::span<const TrainingExample> b, int n) {
  auto grams = [n](std::span<const TrainingExample> exs) {
    std::set<std::string> out;
    for (const TrainingExample& ex : exs) {
      const std::string full = ex.prompt + " " + ex.response;
      if (static_cast<int>(full.size()) < n) continue;
      for (size_t i = 0; i + static_cast<size_t>(n) <= full.size(); ++i) {
        out.insert(full.substr(i, static_cast<size_t>(n)));
      }
    }
    return out;
  };
  const std::set<std::string> ga = grams(a);
  if (ga.empty()) return 0.0;
  const std::set<std::string> gb = grams(b);
  size_t shared = 0;
  for (const std::string& g : ga) shared += gb.count(g);
  return static_cast<double>(shared) / static_cast<double>(ga.size());
}

// ---- example wrapping ------------------------------------------------------

std::span<const int> WrappedExample::response_ids(int stream) const {
  const auto& ids = tokens.at(static_cast<size_t>(stream));
  return std::span<const int>(ids).subspan(
      static_cast<size_t>(response_start.at(static_cast<size_t>(stream))),
      static_cast<size_t>(response_len));
}

WrappedExample wrap_example(const TrainingExample& ex,
                            std::span<const PromptTemplate> templates,
                            const Tokenizer& tokenizer, int max_seq_len) {
  if (templates.empty()) throw DimensionError("wrap_example: no templates");
  WrappedExample w;
  w.domain = ex.domain;
  std::vector<int> response_ids = tokenizer.encode(ex.response);
  response_ids.push_back(Tokenizer::kEos);
  w.response_len = static_cast<int>(response_ids.size());
  for (const PromptTemplate& tpl : templates) {
    std::vector<int> ids;
    ids.push_back(Tokenizer::kBos);
    // Prefix + prompt + infix tokenized as one string: template boundaries
    // are not token boundaries in a character model.
    const std::string head = tpl.prefix + ex.prompt + tpl.infix;
    for (int id : tokenizer.encode(head)) ids.push_back(id);
    const int start = static_cast<int>(ids.size());
    ids.insert(ids.end(), response_ids.begin(), response_ids.end());
    for (int id : tokenizer.encode(tpl.suffix)) ids.push_back(id);
    if (static_cast<int>(ids.size()) > max_seq_len) {
      throw LengthError("wrap_example: sequence of " + std::to_string(ids.size()) +
                        " tokens exceeds the context window of " +
                        std::to_string(max_seq_len));
    }
    w.tokens.push_back(std::move(ids));
    w.response_start.push_back(start);
  }
  // The response ids are shared by construction; verify the invariant anyway
  // since fusion silently produces garbage if streams ever disagree.
  for (int s = 1; s < w.num_streams(); ++s) {
    const auto a = w.response_ids(0);
    const auto b = w.response_ids(s);
    if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) {
      throw AlignmentError("wrap_example: response ids differ between streams");
    }
  }
  return w;
}

// ---- samplers --------------------------------------------------------------

namespace {

std::vector<int64_t> epoch_permutation(uint64_t seed, std::string_view stream_tag,
                                       int64_t epoch, int64_t size) {
  Rng rng(derive_seed(derive_seed(seed, stream_tag),
                      static_cast<uint64_t>(epoch)));
  return rng.permutation(size);
}

}  // namespace

BalancedSampler::BalancedSampler(std::array<int, 3> train_sizes, int per_domain,
                                 uint64_t seed)
    : sizes_(train_sizes), per_domain_(per_domain), seed_(seed) {
  if (per_domain <= 0) throw SamplerError("balanced sampler: per-domain count must be positive");
  for (int d = 0; d < kNumDomains; ++d) {
    if (sizes_[static_cast<size_t>(d)] < per_domain) {
      throw SamplerError("balanced sampler: domain '" +
                         std::string(domain_name(kAllDomains[static_cast<size_t>(d)])) +
                         "' has " + std::to_string(sizes_[static_cast<size_t>(d)]) +
                         " examples, fewer than the per-domain quota of " +
                         std::to_string(per_domain));
    }
  }
  cached_epoch_.fill(-1);
}

int64_t BalancedSampler::position_to_index(int domain, int64_t position) const {
  const int64_t size = sizes_[static_cast<size_t>(domain)];
  const int64_t epoch = position / size;
  const int64_t offset = position % size;
  if (cached_epoch_[static_cast<size_t>(domain)] != epoch) {
    cached_perm_[static_cast<size_t>(domain)] = epoch_permutation(
        seed_, std::string("balanced/") + std::string(domain_name(kAllDomains[static_cast<size_t>(domain)])),
        epoch, size);
    cached_epoch_[static_cast<size_t>(domain)] = epoch;
  }
  return cached_perm_[static_cast<size_t>(domain)][static_cast<size_t>(offset)];
}

std::vector<BatchRef> BalancedSampler::batch(int64_t step) const {
  if (step < 0) throw SamplerError("balanced sampler: negative step");
  std::vector<BatchRef> out;
  out.reserve(static_cast<size_t>(batch_size()));
  for (int d = 0; d < kNumDomains; ++d) {
    const int64_t base = step * per_domain_;
    for (int i = 0; i < per_domain_; ++i) {
      out.push_back({kAllDomains[static_cast<size_t>(d)],
                     static_cast<int>(position_to_index(d, base + i))});
    }
  }
  return out;
}

PooledSampler::PooledSampler(std::array<int, 3> train_sizes, int batch_size,
                             uint64_t seed)
    : sizes_(train_sizes), batch_size_(batch_size), seed_(seed) {
  if (batch_size <= 0) throw SamplerError("pooled sampler: batch size must be positive");
  total_ = 0;
  for (int s : sizes_) total_ += s;
  if (total_ < batch_size_) {
    throw SamplerError("pooled sampler: batch size exceeds pooled corpus size");
  }
}

std::vector<BatchRef> PooledSampler::batch(int64_t step) const {
  if (step < 0) throw SamplerError("pooled sampler: negative step");
  std::vector<BatchRef> out;
  out.reserve(static_cast<size_t>(batch_size_));
  for (int i = 0; i < batch_size_; ++i) {
    const int64_t position = step * batch_size_ + i;
    const int64_t epoch = position / total_;
    const int64_t offset = position % total_;
    if (cached_epoch_ != epoch) {
      cached_perm_ = epoch_permutation(seed_, "pooled", epoch, total_);
      cached_epoch_ = epoch;
    }
    int64_t global = cached_perm_[static_cast<size_t>(offset)];
    for (int d = 0; d < kNumDomains; ++d) {
      if (global < sizes_[static_cast<size_t>(d)]) {
        out.push_back({kAllDomains[static_cast<size_t>(d)], static_cast<int>(global)});
        break;
      }
      global -= sizes_[static_cast<size_t>(d)];
    }
  }
  return out;
}

// ---- serialization ---------------------------------------------------------

namespace {

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_corpus_jsonl(const std::filesystem::path& path,
                       std::span<const TrainingExample> examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const TrainingExample& ex : examples) {
    json j;
    j["domain"] = std::string(domain_name(ex.domain));
    j["prompt"] = ex.prompt;
    j["response"] = ex.response;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<TrainingExample> load_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TrainingExample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw IoError("bad JSON at " + path.string() + ":" + std::to_string(line_no));
    }
    if (!j.contains("domain") || !j.contains("prompt") || !j.contains("response")) {
      throw IoError("missing field at " + path.string() + ":" + std::to_string(line_no));
    }
    out.push_back({domain_from_name(j["domain"].get<std::string>()),
                   j["prompt"].get<std::string>(), j["response"].get<std::string>()});
  }
  return out;
}

void save_corpora(const std::filesystem::path& dir,
                  std::span<const DomainCorpus> corpora, uint64_t seed) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["schema"] = 1;
  manifest["seed"] = seed;
  json files = json::object();
  for (const DomainCorpus& corpus : corpora) {
    const std::string name(domain_name(corpus.domain));
    const auto train_path = dir / (name + ".jsonl");
    const auto heldout_path = dir / (name + ".heldout.jsonl");
    save_corpus_jsonl(train_path, corpus.train);
    save_corpus_jsonl(heldout_path, corpus.heldout);
    json entry;
    entry["train_file"] = train_path.filename().string();
    entry["heldout_file"] = heldout_path.filename().string();
    entry["train_size"] = corpus.train.size();
    entry["heldout_size"] = corpus.heldout.size();
    entry["train_checksum"] = hex_u64(fnv1a_str(read_file_bytes(train_path)));
    entry["heldout_checksum"] = hex_u64(fnv1a_str(read_file_bytes(heldout_path)));
    files[name] = entry;
  }
  manifest["files"] = files;
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

std::vector<DomainCorpus> load_corpora(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  json manifest = json::parse(read_file_bytes(manifest_path), nullptr, false);
  if (manifest.is_discarded()) throw IoError("bad manifest " + manifest_path.string());
  if (!manifest.contains("files")) throw IoError("manifest missing file table");
  std::vector<DomainCorpus> out;
  for (Domain d : kAllDomains) {
    const std::string name(domain_name(d));
    if (!manifest["files"].contains(name)) {
      throw IoError("manifest has no entry for domain '" + name + "'");
    }
    const json& entry = manifest["files"][name];
    DomainCorpus corpus;
    corpus.domain = d;
    for (bool heldout : {false, true}) {
      const std::string file =
          entry[heldout ? "heldout_file" : "train_file"].get<std::string>();
      const std::string want =
          entry[heldout ? "heldout_checksum" : "train_checksum"].get<std::string>();
      const auto path = dir / file;
      const std::string bytes = read_file_bytes(path);
      if (hex_u64(fnv1a_str(bytes)) != want) {
        throw IoError("checksum mismatch for " + path.string() +
                      "; corpus files were modified after manifest creation");
      }
      auto examples = load_corpus_jsonl(path);
      for (const TrainingExample& ex : examples) {
        if (ex.domain != d) {
          throw DomainError("example in " + path.string() +
                            " tagged with wrong domain");
        }
      }
      (heldout ? corpus.heldout : corpus.train) = std::move(examples);
    }
    out.push_back(std::move(corpus));
  }
  return out;
}

}  // namespace fuselm
