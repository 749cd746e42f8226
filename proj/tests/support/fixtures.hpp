// Shared fixtures and helpers for the test binaries.
#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fuselm/bytes.hpp"
#include "fuselm/fuser.hpp"
#include "fuselm/rng.hpp"
#include "fuselm/tensor.hpp"

namespace fuselm::test {

inline LmConfig tiny_config(int d_model = 16, int n_layers = 2, int n_heads = 2,
                            int max_seq_len = 96) {
  LmConfig c;
  c.vocab_size = Tokenizer().vocab_size();
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.feedforward_mult = 2;
  c.max_seq_len = max_seq_len;
  return c;
}

// Overwrites every parameter with small gaussian noise so the model is
// nondegenerate (the default init has a zero head, which makes many
// equivalence checks vacuous). Norm gains stay near 1.
inline void randomize_params(ParamRefs params, uint64_t seed,
                             double stddev = 0.08) {
  Rng rng(derive_seed(seed, "test-random-params"));
  for (NamedParam& p : params) {
    const bool is_norm = p.name.find("norm") != std::string::npos;
    for (double& x : p.tensor.mutable_values()) {
      x = is_norm ? 1.0 + 0.01 * rng.next_normal() : stddev * rng.next_normal();
    }
  }
}

inline FusedModel tiny_fused(uint64_t seed, bool randomize = true,
                             const LmConfig& cfg = tiny_config()) {
  const auto templates = builtin_templates();
  std::vector<Specialist> specialists;
  for (size_t i = 0; i < kAllDomains.size(); ++i) {
    specialists.push_back(Specialist::init(cfg, kAllDomains[i], templates[i],
                                           derive_seed(seed, i)));
  }
  GateNetwork gate = GateNetwork::init(cfg.d_model, cfg.d_model,
                                       derive_seed(seed, "gate"));
  FusedModel model = assemble_fused(std::move(specialists), std::move(gate));
  if (randomize) {
    for (int s = 0; s < model.num_specialists(); ++s) {
      randomize_params(model.specialists[static_cast<size_t>(s)].named_params(),
                       derive_seed(seed, 100 + static_cast<uint64_t>(s)));
    }
    randomize_params(model.gate.named_params(), derive_seed(seed, 200));
  }
  return model;
}

inline uint64_t checksum_tensor(const Tensor& t) {
  const auto vals = t.values();
  return fnv1a(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(vals.data()), vals.size() * sizeof(double)));
}

inline uint64_t checksum_params(const ParamRefs& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const NamedParam& p : params) {
    h = fnv1a_str(p.name, h);
    const uint64_t c = checksum_tensor(p.tensor);
    h = fnv1a(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(&c),
                                       sizeof(c)),
              h);
  }
  return h;
}

// Central finite differences against analytic gradients.
//
// `forward` must rebuild the whole graph and return the scalar loss tensor.
// One tracked pass collects the analytic gradients; the probe passes run
// grad-free. `samples` coordinates per tensor are probed (all when the
// tensor is smaller).
struct FdReport {
  int checked = 0;
  double worst_rel = 0.0;
  std::string worst_at;
};

inline FdReport fd_check(const std::function<Tensor()>& forward,
                         ParamRefs params, double step = 1e-4,
                         int samples = 8, uint64_t seed = 17) {
  Tensor loss = forward();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (NamedParam& p : params) {
    if (!p.tensor.has_grad()) {
      analytic.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    } else {
      const auto g = p.tensor.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
    p.tensor.zero_grad();
  }

  FdReport report;
  Rng rng(derive_seed(seed, "fd-coords"));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    NamedParam& p = params[pi];
    auto vals = p.tensor.mutable_values();
    const int64_t n = p.tensor.numel();
    const int probes = static_cast<int>(std::min<int64_t>(n, samples));
    for (int k = 0; k < probes; ++k) {
      const int64_t idx = probes == n ? k : rng.next_int(0, n - 1);
      const double keep = vals[static_cast<size_t>(idx)];
      double fplus, fminus;
      {
        NoGradGuard guard;
        vals[static_cast<size_t>(idx)] = keep + step;
        fplus = forward().scalar_value();
        vals[static_cast<size_t>(idx)] = keep - step;
        fminus = forward().scalar_value();
        vals[static_cast<size_t>(idx)] = keep;
      }
      const double fd = (fplus - fminus) / (2.0 * step);
      const double an = analytic[pi][static_cast<size_t>(idx)];
      const double rel = std::fabs(fd - an) / std::max(std::fabs(fd) + std::fabs(an), 1e-6);
      ++report.checked;
      if (rel > report.worst_rel) {
        report.worst_rel = rel;
        report.worst_at = p.name + "[" + std::to_string(idx) + "]";
      }
    }
  }
  return report;
}

// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path() / "fuselm-tests";
    std::filesystem::create_directories(base);
    static std::atomic<uint64_t> counter{0};
    path_ = base / (tag + "-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::FILE* f = std::fopen(p.string().c_str(), "rb");
  if (!f) return {};
  std::string out;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  std::fclose(f);
  return out;
}

}  // namespace fuselm::test
