#include "abmll/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "abmll/errors.hpp"

namespace abmll::num {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

// Elementwise binary op with scalar broadcast. `da`/`db` receive (x, y, out)
// and return the local partial derivative.
template <class F, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  Shape shape;
  if (a.shape() == b.shape() || b.numel() == 1) {
    shape = a.shape();
  } else if (a.numel() == 1) {
    shape = b.shape();
  } else {
    throw DimensionError(std::string(name) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not match");
  }
  const std::size_t n = shape_numel(shape);
  const std::size_t as = (a.numel() == 1) ? 0 : 1;
  const std::size_t bs = (b.numel() == 1) ? 0 : 1;
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * as], bv[i * bs]);
  return make_result(std::move(shape), std::move(out), {a, b}, [n, as, bs, da, db](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (A.requires_grad) {
      auto& g = A.grad_slot();
      for (std::size_t i = 0; i < n; ++i)
        g[i * as] += self.grad[i] * da(A.value[i * as], B.value[i * bs], self.value[i]);
    }
    if (B.requires_grad) {
      auto& g = B.grad_slot();
      for (std::size_t i = 0; i < n; ++i)
        g[i * bs] += self.grad[i] * db(A.value[i * as], B.value[i * bs], self.value[i]);
    }
  });
}

// `df` receives (x, out).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& A = *self.parents[0];
    auto& g = A.grad_slot();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(A.value[i], self.value[i]);
  });
}

void require_positive(const Tensor& a, const char* op) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw DomainError(std::string(op) + " of non-positive value " + std::to_string(v));
  }
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(a.shape()));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i < axis) s.outer *= a.shape()[i];
    if (i > axis) s.inner *= a.shape()[i];
    if (i != axis) s.reduced.push_back(a.shape()[i]);
  }
  s.length = a.shape()[axis];
  return s;
}

Tensor reduce_axis(const Tensor& a, std::size_t axis, bool average) {
  AxisSplit s = split_axis(a, axis);
  if (average && s.length == 0) throw ContractError("mean over empty axis");
  const double w = average ? 1.0 / static_cast<double>(s.length) : 1.0;
  auto av = a.values();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.length; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += av[(o * s.length + l) * s.inner + i];
  for (auto& v : out) v *= w;
  return make_result(s.reduced, std::move(out), {a}, [s, w](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.length; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          g[(o * s.length + l) * s.inner + i] += w * self.grad[o * s.inner + i];
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values()) {
    if (v == 0.0) throw DomainError("div by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double out) { return out; });
}

Tensor log(const Tensor& a) {
  require_positive(a, "log");
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  require_positive(a, "sqrt");
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double out) { return 0.5 / out; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kS = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kC = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kS * (x + kC * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kS * (x + kC * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kS * (1.0 + 3.0 * kC * x * x);
      });
}

Tensor map_unary(const Tensor& a, const std::function<double(double)>& f,
                 const std::function<double(double)>& df) {
  return unary(a, f, [df](double x, double) { return df(x); });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result({}, {total}, {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor sum(const Tensor& a, std::size_t axis) { return reduce_axis(a, axis, false); }

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::size_t axis) { return reduce_axis(a, axis, true); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions of " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " disagree");
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    const auto& g = self.grad;
    if (A.requires_grad) {
      auto& ga = A.grad_slot();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B.value[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (B.requires_grad) {
      auto& gb = B.grad_slot();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = A.value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(w.shape()));
  }
  auto xv = x.values();
  auto wv = w.values();
  std::vector<double> out(n * out_dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      const double* xr = xv.data() + i * in;
      const double* wr = wv.data() + o * in;
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      out[i * out_dim + o] = acc;
    }
  return make_result({n, out_dim}, std::move(out), {x, w}, [n, in, out_dim](Node& self) {
    Node& X = *self.parents[0];
    Node& W = *self.parents[1];
    const auto& g = self.grad;
    if (X.requires_grad) {
      auto& gx = X.grad_slot();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = g[i * out_dim + o];
          const double* wr = W.value.data() + o * in;
          double* gr = gx.data() + i * in;
          for (std::size_t p = 0; p < in; ++p) gr[p] += go * wr[p];
        }
    }
    if (W.requires_grad) {
      auto& gw = W.grad_slot();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = g[i * out_dim + o];
          const double* xr = X.value.data() + i * in;
          double* gr = gw.data() + o * in;
          for (std::size_t p = 0; p < in; ++p) gr[p] += go * xr[p];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return make_result({c, r}, std::move(out), {a}, [r, c](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.dim(0)) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for shape " + shape_string(a.shape()));
  }
  const std::size_t c = a.dim(1);
  auto av = a.values();
  std::vector<double> out(av.begin() + begin * c, av.begin() + end * c);
  return make_result({end - begin, c}, std::move(out), {a}, [begin, c](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> indices) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto tv = table.values();
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v) {
      throw IndexError("embedding index " + std::to_string(idx[r]) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
    std::copy_n(tv.begin() + idx[r] * d, d, out.begin() + r * d);
  }
  const std::size_t n = idx.size();
  return make_result({n, d}, std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_rank(x, 2, "rms_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gain.numel() != d) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  auto xv = x.values();
  auto gv = gain.values();
  std::vector<double> inv_rms(n);
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xv[i * d + j] * xv[i * d + j];
    inv_rms[i] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv_rms[i] * gv[j];
  }
  return make_result({n, d}, std::move(out), {x, gain},
                     [n, d, inv_rms = std::move(inv_rms)](Node& self) {
                       Node& X = *self.parents[0];
                       Node& G = *self.parents[1];
                       const auto& g = self.grad;
                       if (X.requires_grad) {
                         auto& gx = X.grad_slot();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double r = inv_rms[i];
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j)
                             dot += g[i * d + j] * G.value[j] * X.value[i * d + j] * r;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double xhat = X.value[i * d + j] * r;
                             gx[i * d + j] +=
                                 r * (g[i * d + j] * G.value[j] - xhat * dot / static_cast<double>(d));
                           }
                         }
                       }
                       if (G.requires_grad) {
                         auto& gg = G.grad_slot();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j)
                             gg[j] += g[i * d + j] * X.value[i * d + j] * inv_rms[i];
                       }
                     });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
  require_rank(q, 2, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("causal_attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  // probs[h][t][s] for s ≤ t, stored densely as n×n per head.
  std::vector<double> probs(n_heads * n * n, 0.0);
  std::vector<double> out(n * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < n; ++t) {
      double* p = probs.data() + (h * n + t) * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hd; ++j) acc += qv[t * d + off + j] * kv[s * d + off + j];
        p[s] = acc * inv_scale;
        mx = std::max(mx, p[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] /= z;
        for (std::size_t j = 0; j < hd; ++j) out[t * d + off + j] += p[s] * vv[s * d + off + j];
      }
    }
  }
  return make_result(
      {n, d}, std::move(out), {q, k, v},
      [n, d, hd, n_heads, inv_scale, probs = std::move(probs)](Node& self) {
        Node& Q = *self.parents[0];
        Node& K = *self.parents[1];
        Node& V = *self.parents[2];
        const auto& g = self.grad;
        std::vector<double> dscore(n);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t t = 0; t < n; ++t) {
            const double* p = probs.data() + (h * n + t) * n;
            double dot = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
              double dp = 0.0;
              for (std::size_t j = 0; j < hd; ++j) dp += g[t * d + off + j] * V.value[s * d + off + j];
              dscore[s] = dp;
              dot += p[s] * dp;
            }
            for (std::size_t s = 0; s <= t; ++s) dscore[s] = p[s] * (dscore[s] - dot) * inv_scale;
            if (V.requires_grad) {
              auto& gv = V.grad_slot();
              for (std::size_t s = 0; s <= t; ++s)
                for (std::size_t j = 0; j < hd; ++j) gv[s * d + off + j] += p[s] * g[t * d + off + j];
            }
            if (Q.requires_grad) {
              auto& gq = Q.grad_slot();
              for (std::size_t s = 0; s <= t; ++s)
                for (std::size_t j = 0; j < hd; ++j)
                  gq[t * d + off + j] += dscore[s] * K.value[s * d + off + j];
            }
            if (K.requires_grad) {
              auto& gk = K.grad_slot();
              for (std::size_t s = 0; s <= t; ++s)
                for (std::size_t j = 0; j < hd; ++j)
                  gk[s * d + off + j] += dscore[s] * Q.value[t * d + off + j];
            }
          }
        }
      });
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto lv = logits.values();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = softmax(lv.subspan(i * c, c));
    std::copy(row.begin(), row.end(), out.begin() + i * c);
  }
  return make_result({n, c}, std::move(out), {logits}, [n, c](Node& self) {
    auto& g = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(logits.shape()));
  }
  if (n == 0) throw ContractError("softmax_cross_entropy over zero rows");
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  for (auto t : tgt) {
    if (t >= c) {
      throw IndexError("target " + std::to_string(t) + " out of range [0, " + std::to_string(c) + ")");
    }
  }
  auto lv = logits.values();
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += (std::log(z) + mx) - row[tgt[i]];
  }
  loss /= static_cast<double>(n);
  return make_result({}, {loss}, {logits},
                     [n, c, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
                       auto& g = self.parents[0]->grad_slot();
                       const double w = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += w * probs[i * c + j];
                         g[i * c + tgt[i]] -= w;
                       }
                     });
}

std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  if (scores.empty()) return out;
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

}  // namespace abmll::num
