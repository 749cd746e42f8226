#include <doctest.h>

#include <cmath>

#include "fuselm/error.hpp"
#include "fuselm/lm.hpp"
#include "fuselm/rng.hpp"
#include "fuselm/tensor.hpp"
#include "support/fixtures.hpp"

using namespace fuselm;
namespace ft = fuselm::test;

namespace {
Specialist make_spec(uint64_t seed, bool randomize = false) {
  const auto templates = builtin_templates();
  Specialist s = Specialist::init(ft::tiny_config(), Domain::kText, templates[0], seed);
  if (randomize) ft::randomize_params(s.named_params(), seed);
  return s;
}
}  // namespace

TEST_CASE("lm config: validation") {
  LmConfig c = ft::tiny_config();
  c.validate();
  c.n_heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ft::tiny_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("lm: init is seed-deterministic and seed-sensitive") {
  Specialist a = make_spec(42);
  Specialist b = make_spec(42);
  Specialist c = make_spec(43);
  CHECK(ft::checksum_params(a.named_params()) == ft::checksum_params(b.named_params()));
  CHECK(ft::checksum_params(a.named_params()) != ft::checksum_params(c.named_params()));
  // Stable parameter census: embeddings + head + final norm + 8 per layer.
  CHECK(a.named_params().size() == 4 + 8 * 2);
  for (const auto& p : a.named_params()) {
    for (double v : p.tensor.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("lm: single-token input produces single-row output") {
  Specialist s = make_spec(1, true);
  std::vector<int> tokens = {Tokenizer::kBos};
  SpecialistOutput out = s.forward(tokens);
  CHECK(out.hidden.shape() == Shape{1, 16});
  CHECK(out.logits.shape() == Shape{1, s.config().vocab_size});
}

TEST_CASE("lm: causality — perturbing position j only affects outputs >= j") {
  Specialist s = make_spec(7, true);
  Tokenizer tok;
  std::vector<int> base = {Tokenizer::kBos};
  for (int id : tok.encode("abcdefgh")) base.push_back(id);

  NoGradGuard guard;
  SpecialistOutput ref = s.forward(base);
  for (size_t j : {size_t{3}, size_t{6}}) {
    std::vector<int> perturbed = base;
    perturbed[j] = tok.char_id('z');
    SpecialistOutput out = s.forward(perturbed);
    for (size_t t = 0; t < base.size(); ++t) {
      double diff = 0.0;
      for (int64_t v = 0; v < s.config().vocab_size; ++v) {
        diff = std::max(diff, std::fabs(out.logits.at(static_cast<int64_t>(t), v) -
                                        ref.logits.at(static_cast<int64_t>(t), v)));
      }
      if (t < j) {
        CHECK(diff == 0.0);  // strictly before the edit: bit-identical
      }
    }
    // The edited position itself must influence its own next-token logits.
    double at_j = 0.0;
    for (int64_t v = 0; v < s.config().vocab_size; ++v) {
      at_j = std::max(at_j, std::fabs(out.logits.at(static_cast<int64_t>(j), v) -
                                      ref.logits.at(static_cast<int64_t>(j), v)));
    }
    CHECK(at_j > 0.0);
  }
}

TEST_CASE("lm: zero head makes the untrained model exactly uniform") {
  Specialist s = make_spec(3);  // default init: zero output head
  Tokenizer tok;
  std::vector<int> tokens = {Tokenizer::kBos};
  for (int id : tok.encode("hello")) tokens.push_back(id);
  NoGradGuard guard;
  SpecialistOutput out = s.forward(tokens);
  for (int64_t t = 0; t < out.logits.dim(0); ++t) {
    for (int64_t v = 0; v < out.logits.dim(1); ++v) {
      CHECK(out.logits.at(t, v) == 0.0);
    }
  }
  // Mean response NLL therefore equals ln V.
  TrainingExample ex{Domain::kText, "hi", "there"};
  const double nll = response_nll(s, ex, tok);
  CHECK(nll == doctest::Approx(std::log(double(s.config().vocab_size))).epsilon(1e-9));
}

TEST_CASE("lm: context-window and vocabulary guards") {
  Specialist s = make_spec(4);
  std::vector<int> too_long(static_cast<size_t>(s.config().max_seq_len) + 1, 5);
  CHECK_THROWS_AS(s.forward(too_long), LengthError);
  std::vector<int> bad = {Tokenizer::kBos, s.config().vocab_size};
  CHECK_THROWS_AS(s.forward(bad), VocabError);
}

TEST_CASE("lm: perplexity basics") {
  Specialist s = make_spec(5);  // uniform model
  Tokenizer tok;
  std::vector<TrainingExample> examples = {{Domain::kText, "ab", "cd"},
                                           {Domain::kText, "x", "yz"}};
  PerplexityResult r = specialist_perplexity(s, examples, tok);
  // Uniform model: perplexity = V exactly.
  CHECK(r.perplexity() == doctest::Approx(double(s.config().vocab_size)).epsilon(1e-9));
  CHECK(r.token_count == 3 + 3);  // chars + end marker per example
  CHECK(r.perplexity() >= 1.0);

  // exp(mean nll) composition.
  CHECK(r.perplexity() == doctest::Approx(std::exp(r.mean_nll())).epsilon(1e-12));
}

TEST_CASE("lm: save/load round-trip preserves every bit") {
  ft::TempDir dir("lm-ckpt");
  Specialist s = make_spec(6, true);
  const auto path = dir.path() / "spec.ckpt";
  save_specialist(path, s);
  Tokenizer tok;
  Specialist loaded = load_specialist(path, tok);
  CHECK(loaded.domain() == s.domain());
  CHECK(loaded.config() == s.config());
  CHECK(loaded.prompt_template().prefix == s.prompt_template().prefix);
  CHECK(ft::checksum_params(loaded.named_params()) ==
        ft::checksum_params(s.named_params()));

  // Identical forwards after reload.
  NoGradGuard guard;
  std::vector<int> tokens = {Tokenizer::kBos, 5, 9, 22};
  SpecialistOutput a = s.forward(tokens);
  SpecialistOutput b = loaded.forward(tokens);
  CHECK(ft::checksum_tensor(a.logits) == ft::checksum_tensor(b.logits));
}

TEST_CASE("lm: response_nll masks the prompt conditioning") {
  // Gradient of the response loss w.r.t. the head must exist; and editing the
  // template suffix (outside the span) must not change the loss.
  Tokenizer tok;
  const auto templates = builtin_templates();
  Specialist s = Specialist::init(ft::tiny_config(), Domain::kText, templates[0], 8);
  ft::randomize_params(s.named_params(), 8);
  TrainingExample ex{Domain::kText, "abc", "de"};
  const double base = response_nll(s, ex, tok);

  PromptTemplate suffixed = templates[0];
  suffixed.suffix = "!!!";
  Specialist s2 = Specialist::init(ft::tiny_config(), Domain::kText, suffixed, 8);
  ft::randomize_params(s2.named_params(), 8);
  CHECK(response_nll(s2, ex, tok) == doctest::Approx(base).epsilon(1e-12));
}
