#include "fuselm/ops.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <utility>

namespace fuselm {
namespace {

using detail::TensorNode;

void require_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw DimensionError(std::string(who) + ": undefined tensor");
}

// Constructs an op node. If grad is disabled or no input tracks gradients the
// result is a plain constant tensor and `make_backward` is never invoked.
template <typename MakeBackward>
Tensor make_op(Shape shape, std::vector<double> values,
               std::initializer_list<Tensor> inputs,
               MakeBackward&& make_backward) {
  Tensor out = Tensor::from_values(std::move(shape), std::move(values));
  bool track = detail::grad_enabled();
  if (track) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    track = any;
  }
  if (track) {
    auto node = out.node();
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = make_backward();
  }
  return out;
}

// In-place: g += factor * src (both length n).
inline void axpy(double* g, const double* src, double factor, int64_t n) {
  for (int64_t i = 0; i < n; ++i) g[i] += factor * src[i];
}

// C[m,n] += A[m,k] * B[k,n], row-major, i-k-j loop order (streams B rows).
void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,
              int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      if (aik == 0.0) continue;
      const double* bk = b + kk * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T  (B given row-major as [n,k]).
void gemm_bt_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]  (A given row-major as [m,k]).
void gemm_at_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      if (aik == 0.0) continue;
      double* ck = c + kk * n;
      for (int64_t j = 0; j < n; ++j) ck[j] += aik * bi[j];
    }
  }
}

void check_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(who) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a, b}, [&] {
    auto an = a.node(), bn = b.node();
    return [an, bn, m, k, n](TensorNode& node) {
      const double* g = node.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = dC * B^T
        gemm_bt_acc(g, bn->values.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * dC
        gemm_at_acc(an->values.data(), g, bn->grad.data(), m, k, n);
      }
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [&] {
      auto an = a.node(), bn = b.node();
      return [an, bn](TensorNode& node) {
        const int64_t n = node.numel();
        if (an->requires_grad) {
          an->ensure_grad();
          axpy(an->grad.data(), node.grad.data(), 1.0, n);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          axpy(bn->grad.data(), node.grad.data(), 1.0, n);
        }
      };
    });
  }
  // Row broadcast: a [m,n] + b [n].
  if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) {
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (int64_t i = 0; i < m; ++i) {
      double* row = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) row[j] += bv[static_cast<size_t>(j)];
    }
    return make_op(a.shape(), std::move(out), {a, b}, [&] {
      auto an = a.node(), bn = b.node();
      return [an, bn, m, n](TensorNode& node) {
        const double* g = node.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          axpy(an->grad.data(), g, 1.0, m * n);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          double* bg = bn->grad.data();
          for (int64_t i = 0; i < m; ++i) {
            const double* gi = g + i * n;
            for (int64_t j = 0; j < n; ++j) bg[j] += gi[j];
          }
        }
      };
    });
  }
  throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [&] {
    auto an = a.node(), bn = b.node();
    return [an, bn](TensorNode& node) {
      const int64_t n = node.numel();
      const double* g = node.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        double* ag = an->grad.data();
        const double* bvals = bn->values.data();
        for (int64_t i = 0; i < n; ++i) ag[i] += g[i] * bvals[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        double* bg = bn->grad.data();
        const double* avals = an->values.data();
        for (int64_t i = 0; i < n; ++i) bg[i] += g[i] * avals[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, double c) {
  require_defined(a, "scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  return make_op(a.shape(), std::move(out), {a}, [&] {
    auto an = a.node();
    return [an, c](TensorNode& node) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      axpy(an->grad.data(), node.grad.data(), c, node.numel());
    };
  });
}

Tensor relu(const Tensor& a) {
  require_defined(a, "relu");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [&] {
    auto an = a.node();
    return [an](TensorNode& node) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const int64_t n = node.numel();
      const double* g = node.grad.data();
      const double* x = an->values.data();
      double* ag = an->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) ag[i] += g[i];
      }
    };
  });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_op({}, {total}, {a}, [&] {
    auto an = a.node();
    return [an](TensorNode& node) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const double g = node.grad[0];
      double* ag = an->grad.data();
      const int64_t n = an->numel();
      for (int64_t i = 0; i < n; ++i) ag[i] += g;
    };
  });
}

Tensor softmax(const Tensor& a, int axis) {
  require_defined(a, "softmax");
  const int r = a.rank();
  if (r == 0) throw DimensionError("softmax: scalar input");
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("softmax: axis out of range for " + shape_str(a.shape()));
  }
  // View the tensor as [outer, len, inner] with the softmax along `len`.
  const Shape& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  const int64_t len = s[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  if (len == 0) throw DimensionError("softmax: empty axis");

  const auto av = a.values();
  std::vector<double> out(av.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t l = 0; l < len; ++l) {
        const double v = av[static_cast<size_t>(base + l * inner)];
        if (!std::isfinite(v)) {
          // The causal-mask constant is finite by design; anything non-finite
          // here is a real numerical failure upstream.
          throw NumericError("softmax: non-finite input");
        }
        mx = v > mx ? v : mx;
      }
      double denom = 0.0;
      for (int64_t l = 0; l < len; ++l) {
        const size_t idx = static_cast<size_t>(base + l * inner);
        const double e = std::exp(av[idx] - mx);
        out[idx] = e;
        denom += e;
      }
      for (int64_t l = 0; l < len; ++l) out[static_cast<size_t>(base + l * inner)] /= denom;
    }
  }
  return make_op(a.shape(), std::move(out), {a}, [&] {
    auto an = a.node();
    return [an, outer, len, inner](TensorNode& node) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const double* y = node.values.data();
      const double* g = node.grad.data();
      double* ag = an->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * len * inner + in;
          double dot = 0.0;
          for (int64_t l = 0; l < len; ++l) {
            const size_t idx = static_cast<size_t>(base + l * inner);
            dot += y[idx] * g[idx];
          }
          for (int64_t l = 0; l < len; ++l) {
            const size_t idx = static_cast<size_t>(base + l * inner);
            ag[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    };
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> mask) {
  require_defined(logits, "cross_entropy");
  check_rank2(logits, "cross_entropy");
  const int64_t t_len = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t_len ||
      static_cast<int64_t>(mask.size()) != t_len) {
    throw DimensionError("cross_entropy: got " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(mask.size()) +
                         " mask flags for " + std::to_string(t_len) + " rows");
  }
  int64_t counted = 0;
  for (int64_t t = 0; t < t_len; ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    ++counted;
    const int id = targets[static_cast<size_t>(t)];
    if (id < 0 || id >= vocab) {
      throw VocabError("cross_entropy: target id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  if (counted == 0) throw EmptyLossError("cross_entropy: mask selects no positions");

  // Stable per-row log-softmax; keep the probabilities for the backward pass.
  const auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(lv.size(), 0.0);
  double total = 0.0;
  for (int64_t t = 0; t < t_len; ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    const double* row = lv.data() + t * vocab;
    double mx = row[0];
    for (int64_t v = 1; v < vocab; ++v) mx = row[v] > mx ? row[v] : mx;
    if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite logits");
    double denom = 0.0;
    double* prow = probs->data() + t * vocab;
    for (int64_t v = 0; v < vocab; ++v) {
      const double e = std::exp(row[v] - mx);
      prow[v] = e;
      denom += e;
    }
    for (int64_t v = 0; v < vocab; ++v) prow[v] /= denom;
    const int id = targets[static_cast<size_t>(t)];
    total += std::log(denom) + mx - row[id];
  }
  const double mean = total / static_cast<double>(counted);

  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<uint8_t> msk(mask.begin(), mask.end());
  return make_op({}, {mean}, {logits}, [&] {
    auto ln = logits.node();
    return [ln, probs, tgt = std::move(tgt), msk = std::move(msk), t_len, vocab,
            counted](TensorNode& node) {
      if (!ln->requires_grad) return;
      ln->ensure_grad();
      const double g = node.grad[0] / static_cast<double>(counted);
      double* lg = ln->grad.data();
      for (int64_t t = 0; t < t_len; ++t) {
        if (!msk[static_cast<size_t>(t)]) continue;  // exactly zero gradient
        const double* prow = probs->data() + t * vocab;
        double* grow = lg + t * vocab;
        for (int64_t v = 0; v < vocab; ++v) grow[v] += g * prow[v];
        grow[tgt[static_cast<size_t>(t)]] -= g;
      }
    };
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "embedding_lookup");
  check_rank2(table, "embedding_lookup");
  const int64_t rows = table.dim(0), width = table.dim(1);
  const int64_t t_len = static_cast<int64_t>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw VocabError("embedding_lookup: id " + std::to_string(id) +
                       " outside table of " + std::to_string(rows) + " rows");
    }
  }
  std::vector<double> out(static_cast<size_t>(t_len * width));
  const auto tv = table.values();
  for (int64_t t = 0; t < t_len; ++t) {
    std::memcpy(out.data() + t * width,
                tv.data() + static_cast<int64_t>(ids[static_cast<size_t>(t)]) * width,
                static_cast<size_t>(width) * sizeof(double));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op({t_len, width}, std::move(out), {table}, [&] {
    auto tn = table.node();
    return [tn, idv = std::move(idv), width](TensorNode& node) {
      if (!tn->requires_grad) return;
      tn->ensure_grad();
      const double* g = node.grad.data();
      double* tg = tn->grad.data();
      for (size_t t = 0; t < idv.size(); ++t) {
        axpy(tg + static_cast<int64_t>(idv[t]) * width,
             g + static_cast<int64_t>(t) * width, 1.0, width);
      }
    };
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  require_defined(x, "rmsnorm");
  require_defined(weight, "rmsnorm");
  check_rank2(x, "rmsnorm");
  if (weight.rank() != 1 || weight.dim(0) != x.dim(1)) {
    throw DimensionError("rmsnorm: weight shape " + shape_str(weight.shape()) +
                         " does not match feature dim of " + shape_str(x.shape()));
  }
  const int64_t t_len = x.dim(0), d = x.dim(1);
  const auto xv = x.values();
  const auto wv = weight.values();
  std::vector<double> out(xv.size());
  // Inverse rms per row, saved for backward.
  auto inv_rms = std::make_shared<std::vector<double>>(static_cast<size_t>(t_len));
  for (int64_t t = 0; t < t_len; ++t) {
    const double* row = xv.data() + t * d;
    double ssq = 0.0;
    for (int64_t j = 0; j < d; ++j) ssq += row[j] * row[j];
    const double r = 1.0 / std::sqrt(ssq / static_cast<double>(d) + eps);
    (*inv_rms)[static_cast<size_t>(t)] = r;
    double* orow = out.data() + t * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = row[j] * r * wv[static_cast<size_t>(j)];
  }
  return make_op(x.shape(), std::move(out), {x, weight}, [&] {
    auto xn = x.node(), wn = weight.node();
    return [xn, wn, inv_rms, t_len, d](TensorNode& node) {
      const double* g = node.grad.data();
      const double* xvals = xn->values.data();
      const double* wvals = wn->values.data();
      if (wn->requires_grad) {
        wn->ensure_grad();
        double* wg = wn->grad.data();
        for (int64_t t = 0; t < t_len; ++t) {
          const double r = (*inv_rms)[static_cast<size_t>(t)];
          const double* xrow = xvals + t * d;
          const double* grow = g + t * d;
          for (int64_t j = 0; j < d; ++j) wg[j] += grow[j] * xrow[j] * r;
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        double* xg = xn->grad.data();
        for (int64_t t = 0; t < t_len; ++t) {
          const double r = (*inv_rms)[static_cast<size_t>(t)];
          const double* xrow = xvals + t * d;
          const double* grow = g + t * d;
          // dx_j = r*w_j*g_j - (r^3/d) * x_j * sum_k(g_k * w_k * x_k)
          double dot = 0.0;
          for (int64_t j = 0; j < d; ++j) dot += grow[j] * wvals[j] * xrow[j];
          const double coef = r * r * r * dot / static_cast<double>(d);
          double* xgrow = xg + t * d;
          for (int64_t j = 0; j < d; ++j) {
            xgrow[j] += r * wvals[j] * grow[j] - coef * xrow[j];
          }
        }
      }
    };
  });
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             int n_heads) {
  require_defined(q, "causal_self_attention");
  require_defined(k, "causal_self_attention");
  require_defined(v, "causal_self_attention");
  check_rank2(q, "causal_self_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("causal_self_attention: q/k/v shapes differ: " +
                         shape_str(q.shape()) + " " + shape_str(k.shape()) + " " +
                         shape_str(v.shape()));
  }
  const int64_t t_len = q.dim(0), d = q.dim(1);
  if (n_heads <= 0 || d % n_heads != 0) {
    throw DimensionError("causal_self_attention: model dim " + std::to_string(d) +
                         " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const int64_t hd = d / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  std::vector<double> out(static_cast<size_t>(t_len * d), 0.0);
  // Post-softmax attention matrices, one [T,T] block per head, kept for the
  // backward pass. Masked entries hold exact zeros.
  auto attn = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n_heads) * static_cast<size_t>(t_len * t_len), 0.0);

  std::vector<double> scores(static_cast<size_t>(t_len));
  for (int h = 0; h < n_heads; ++h) {
    const int64_t off = static_cast<int64_t>(h) * hd;
    double* ahead = attn->data() + static_cast<int64_t>(h) * t_len * t_len;
    for (int64_t i = 0; i < t_len; ++i) {
      const double* qi = qv + i * d + off;
      // Scores: scaled dot products up to the diagonal, the causal-mask
      // constant beyond it. With the max-subtraction softmax the masked
      // entries underflow to exactly 0.
      for (int64_t j = 0; j <= i; ++j) {
        const double* kj = kv + j * d + off;
        double acc = 0.0;
        for (int64_t x = 0; x < hd; ++x) acc += qi[x] * kj[x];
        scores[static_cast<size_t>(j)] = acc * scl;
      }
      for (int64_t j = i + 1; j < t_len; ++j) scores[static_cast<size_t>(j)] = kCausalMaskValue;
      double mx = scores[0];
      for (int64_t j = 1; j <= i; ++j) mx = scores[static_cast<size_t>(j)] > mx ? scores[static_cast<size_t>(j)] : mx;
      if (!std::isfinite(mx)) throw NumericError("causal_self_attention: non-finite scores");
      double denom = 0.0;
      double* arow = ahead + i * t_len;
      for (int64_t j = 0; j < t_len; ++j) {
        const double e = std::exp(scores[static_cast<size_t>(j)] - mx);
        arow[j] = e;
        denom += e;
      }
      for (int64_t j = 0; j < t_len; ++j) arow[j] /= denom;
      double* orow = out.data() + i * d + off;
      for (int64_t j = 0; j <= i; ++j) {
        const double a = arow[j];
        if (a == 0.0) continue;
        const double* vrow = vv + j * d + off;
        for (int64_t x = 0; x < hd; ++x) orow[x] += a * vrow[x];
      }
    }
  }

  return make_op(q.shape(), std::move(out), {q, k, v}, [&] {
    auto qn = q.node(), kn = k.node(), vn = v.node();
    return [qn, kn, vn, attn, n_heads, t_len, d, hd, scl](TensorNode& node) {
      const double* g = node.grad.data();
      const bool need_q = qn->requires_grad, need_k = kn->requires_grad,
                 need_v = vn->requires_grad;
      if (need_q) qn->ensure_grad();
      if (need_k) kn->ensure_grad();
      if (need_v) vn->ensure_grad();
      const double* qvals = qn->values.data();
      const double* kvals = kn->values.data();
      const double* vvals = vn->values.data();
      std::vector<double> da(static_cast<size_t>(t_len));  // dL/dA for one row
      for (int h = 0; h < n_heads; ++h) {
        const int64_t off = static_cast<int64_t>(h) * hd;
        const double* ahead = attn->data() + static_cast<int64_t>(h) * t_len * t_len;
        for (int64_t i = 0; i < t_len; ++i) {
          const double* arow = ahead + i * t_len;
          const double* grow = g + i * d + off;
          // dA[i,j] = dOut[i] . V[j]; masked j have A==0 and drop out below.
          for (int64_t j = 0; j <= i; ++j) {
            const double* vrow = vvals + j * d + off;
            double acc = 0.0;
            for (int64_t x = 0; x < hd; ++x) acc += grow[x] * vrow[x];
            da[static_cast<size_t>(j)] = acc;
          }
          // dV[j] += A[i,j] * dOut[i]
          if (need_v) {
            double* vg = vn->grad.data();
            for (int64_t j = 0; j <= i; ++j) {
              const double a = arow[j];
              if (a == 0.0) continue;
              axpy(vg + j * d + off, grow, a, hd);
            }
          }
          // Softmax Jacobian: dS = A * (dA - sum_j A dA), then the scaled
          // dot-product pulls dS into dQ and dK.
          double dot = 0.0;
          for (int64_t j = 0; j <= i; ++j) dot += arow[j] * da[static_cast<size_t>(j)];
          if (need_q || need_k) {
            double* qg = need_q ? qn->grad.data() : nullptr;
            double* kg = need_k ? kn->grad.data() : nullptr;
            const double* qi = qvals + i * d + off;
            for (int64_t j = 0; j <= i; ++j) {
              const double ds = arow[j] * (da[static_cast<size_t>(j)] - dot) * scl;
              if (ds == 0.0) continue;
              if (need_q) axpy(qg + i * d + off, kvals + j * d + off, ds, hd);
              if (need_k) axpy(kg + j * d + off, qi, ds, hd);
            }
          }
        }
      }
    };
  });
}

Tensor concat_scores(std::span<const Tensor> columns) {
  if (columns.empty()) throw DimensionError("concat_scores: no columns");
  for (const Tensor& c : columns) {
    require_defined(c, "concat_scores");
    check_rank2(c, "concat_scores");
    if (c.dim(1) != 1) {
      throw DimensionError("concat_scores: expected [T,1] columns, got " +
                           shape_str(c.shape()));
    }
    if (c.dim(0) != columns[0].dim(0)) {
      throw DimensionError("concat_scores: column lengths differ");
    }
  }
  const int64_t t_len = columns[0].dim(0);
  const int64_t s_count = static_cast<int64_t>(columns.size());
  std::vector<double> out(static_cast<size_t>(t_len * s_count));
  for (int64_t s = 0; s < s_count; ++s) {
    const auto cv = columns[static_cast<size_t>(s)].values();
    for (int64_t t = 0; t < t_len; ++t) out[static_cast<size_t>(t * s_count + s)] = cv[static_cast<size_t>(t)];
  }

  Tensor result = Tensor::from_values({t_len, s_count}, std::move(out));
  bool track = detail::grad_enabled();
  if (track) {
    bool any = false;
    for (const Tensor& c : columns) any = any || c.requires_grad();
    track = any;
  }
  if (track) {
    auto node = result.node();
    node->requires_grad = true;
    std::vector<std::shared_ptr<detail::TensorNode>> cols;
    for (const Tensor& c : columns) {
      node->parents.push_back(c.node());
      cols.push_back(c.node());
    }
    node->backward_fn = [cols = std::move(cols), t_len, s_count](TensorNode& node) {
      const double* g = node.grad.data();
      for (int64_t s = 0; s < s_count; ++s) {
        auto& cn = cols[static_cast<size_t>(s)];
        if (!cn->requires_grad) continue;
        cn->ensure_grad();
        double* cg = cn->grad.data();
        for (int64_t t = 0; t < t_len; ++t) cg[t] += g[t * s_count + s];
      }
    };
  }
  return result;
}

Tensor weighted_mix(const Tensor& weights, std::span<const Tensor> parts) {
  require_defined(weights, "weighted_mix");
  check_rank2(weights, "weighted_mix");
  if (parts.empty()) throw DimensionError("weighted_mix: no parts");
  const int64_t t_len = weights.dim(0);
  const int64_t s_count = weights.dim(1);
  if (s_count != static_cast<int64_t>(parts.size())) {
    throw DimensionError("weighted_mix: " + std::to_string(parts.size()) +
                         " parts for weight shape " + shape_str(weights.shape()));
  }
  for (const Tensor& p : parts) {
    require_defined(p, "weighted_mix");
    check_rank2(p, "weighted_mix");
    if (p.shape() != parts[0].shape()) {
      throw DimensionError("weighted_mix: part shapes differ");
    }
  }
  if (parts[0].dim(0) != t_len) {
    throw DimensionError("weighted_mix: weights cover " + std::to_string(t_len) +
                         " rows, parts have " + std::to_string(parts[0].dim(0)));
  }
  const int64_t vocab = parts[0].dim(1);

  const double* wv = weights.values().data();
  std::vector<double> out(static_cast<size_t>(t_len * vocab), 0.0);
  for (int64_t s = 0; s < s_count; ++s) {
    const double* pv = parts[static_cast<size_t>(s)].values().data();
    for (int64_t t = 0; t < t_len; ++t) {
      const double w = wv[t * s_count + s];
      if (w == 0.0) continue;
      axpy(out.data() + t * vocab, pv + t * vocab, w, vocab);
    }
  }

  Tensor result = Tensor::from_values({t_len, vocab}, std::move(out));
  bool track = detail::grad_enabled();
  if (track) {
    bool any = weights.requires_grad();
    for (const Tensor& p : parts) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    auto node = result.node();
    node->requires_grad = true;
    node->parents.push_back(weights.node());
    std::vector<std::shared_ptr<detail::TensorNode>> pn;
    for (const Tensor& p : parts) {
      node->parents.push_back(p.node());
      pn.push_back(p.node());
    }
    auto wn = weights.node();
    node->backward_fn = [wn, pn = std::move(pn), t_len, s_count,
                         vocab](TensorNode& node) {
      const double* g = node.grad.data();
      if (wn->requires_grad) {
        wn->ensure_grad();
        double* wg = wn->grad.data();
        // dW[t,s] = dOut[t,:] . part_s[t,:]
        for (int64_t s = 0; s < s_count; ++s) {
          const double* pv = pn[static_cast<size_t>(s)]->values.data();
          for (int64_t t = 0; t < t_len; ++t) {
            const double* grow = g + t * vocab;
            const double* prow = pv + t * vocab;
            double acc = 0.0;
            for (int64_t x = 0; x < vocab; ++x) acc += grow[x] * prow[x];
            wg[t * s_count + s] += acc;
          }
        }
      }
      const double* wv = wn->values.data();
      for (int64_t s = 0; s < s_count; ++s) {
        auto& p = pn[static_cast<size_t>(s)];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        double* pg = p->grad.data();
        // dPart_s[t,:] = w[t,s] * dOut[t,:]
        for (int64_t t = 0; t < t_len; ++t) {
          const double w = wv[t * s_count + s];
          if (w == 0.0) continue;
          axpy(pg + t * vocab, g + t * vocab, w, vocab);
        }
      }
    };
  }
  return result;
}

}  // namespace fuselm
