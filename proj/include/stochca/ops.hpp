#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "stochca/tape.hpp"

// Differentiable operations. Each computes its value with the plain kernels
// and registers a backward rule on the tape.
namespace stochca::ops {

namespace detail {
inline void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}
inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) + " * " +
                         shape_str(bv.shape()));
  return a.tape->record("matmul", kernels::matmul(av, bv), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) kernels::matmul_nt_acc(g, t.value(b), t.grad(a));  // dA = dC B^T
    if (t.needs_grad(b)) kernels::matmul_tn_acc(t.value(a), g, t.grad(b));  // dB = A^T dC
  });
}

inline Var transpose(Var a) {
  detail::require_matrix("transpose", a.value());
  return a.tape->record("transpose", kernels::transpose(a.value()), {a},
                        [a](Tape& t, const Tensor& g) { accumulate(t, a, kernels::transpose(g)); });
}

inline Var add(Var a, Var b) {
  detail::require_same("add", a.value(), b.value());
  Tensor out = a.value();
  kernels::axpy(1.0, b.value(), out);
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  kernels::axpy(-1.0, b.value(), out);
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    if (t.needs_grad(b)) kernels::axpy(-1.0, g, t.grad(b));
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) kernels::axpy(s, g, t.grad(a));
  });
}

/// Adds a length-n bias to every row of an m x n matrix (the only broadcast supported).
inline Var add_row_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_matrix("add_row_bias", xv);
  if (bv.size() != xv.cols())
    throw DimensionError("add_row_bias: bias " + shape_str(bv.shape()) + " for matrix " + shape_str(xv.shape()));
  Tensor out = xv;
  const std::size_t r = xv.rows(), c = xv.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += bv[j];
  return x.tape->record("add_row_bias", std::move(out), {x, bias}, [x, bias, r, c](Tape& t, const Tensor& g) {
    accumulate(t, x, g);
    if (t.needs_grad(bias)) {
      Tensor& gb = t.grad(bias);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  });
}

inline Var softmax_rows(Var m) {
  detail::require_matrix("softmax_rows", m.value());
  Tensor out = kernels::softmax_rows(m.value());
  Tensor y = out;
  return m.tape->record("softmax_rows", std::move(out), {m}, [m, y = std::move(y)](Tape& t, const Tensor& g) {
    if (!t.needs_grad(m)) return;
    Tensor& gm = t.grad(m);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y(i, j);
      for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += y(i, j) * (g[i * c + j] - dot);
    }
  });
}

/// Row-wise layer normalization with population variance and eps inside the root.
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  detail::require_matrix("layer_norm", xv);
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(d));
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  Tensor out({n, d});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xv(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gain);
        if (t.needs_grad(gain)) {
          Tensor& gg = t.grad(gain);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat(i, j);
        }
        if (t.needs_grad(bias)) {
          Tensor& gb = t.grad(bias);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (t.needs_grad(x)) {
          Tensor& gx = t.grad(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gv[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat(i, j);
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gv[j];
              gx[i * d + j] += inv_std[i] * (dy - inv_d * sum_dy - xhat(i, j) * inv_d * sum_dy_xhat);
            }
          }
        }
      });
}

/// Exact (erf-based) GELU.
inline Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  return x.tape->record("gelu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (!t.needs_grad(x)) return;
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
      gx[i] += g[i] * (cdf + xv[i] * pdf);
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  detail::require_matrix("cross_entropy", z);
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
  Tensor probs = kernels::softmax_rows(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = z.data() + i * c;
    std::size_t top = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[top]) top = j;
    double rest = 0.0;  // sum of exp(z_j - max) without the max term itself
    for (std::size_t j = 0; j < c; ++j)
      if (j != top) rest += std::exp(row[j] - row[top]);
    loss += (row[top] - row[labels[i]]) + std::log1p(rest);
  }
  loss /= static_cast<double>(b);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record("cross_entropy", Tensor::scalar(loss), {logits},
                             [logits, probs = std::move(probs), ys = std::move(ys), b, c](Tape& t, const Tensor& g) {
                               if (!t.needs_grad(logits)) return;
                               Tensor& gz = t.grad(logits);
                               const double s = g[0] / static_cast<double>(b);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   gz[i * c + j] += s * (probs(i, j) - (static_cast<int>(j) == ys[i] ? 1.0 : 0.0));
                             });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  detail::require_matrix("slice_rows", av);
  if (begin >= end || end > av.rows())
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                     shape_str(av.shape()));
  const std::size_t c = av.cols();
  Tensor out({end - begin, c});
  std::copy(av.data() + begin * c, av.data() + end * c, out.data());
  return a.tape->record("slice_rows", std::move(out), {a}, [a, begin, c](Tape& t, const Tensor& g) {
    if (!t.needs_grad(a)) return;
    double* dst = t.grad(a).data() + begin * c;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != c) throw DimensionError("concat_rows: column mismatch");
    rows += p.value().rows();
  }
  Tensor out({rows, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data(), v.data() + v.size(), out.data() + off);
    off += v.size();
  }
  return parts.front().tape->record("concat_rows", std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t n = t.value(p).size();
      if (t.needs_grad(p)) {
        Tensor& gp = t.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

/// Picks rows by index (indices may repeat).
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& av = a.value();
  detail::require_matrix("gather_rows", av);
  const std::size_t c = av.cols();
  Tensor out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.rows()) throw IndexError("gather_rows: row " + std::to_string(index[i]) + " out of range");
    std::copy(av.data() + index[i] * c, av.data() + (index[i] + 1) * c, out.data() + i * c);
  }
  return a.tape->record("gather_rows", std::move(out), {a}, [a, index = std::move(index), c](Tape& t, const Tensor& g) {
    if (!t.needs_grad(a)) return;
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[index[i] * c + j] += g[i * c + j];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    if (!t.needs_grad(a)) return;
    Tensor& ga = t.grad(a);
    for (double& v : ga.values()) v += g[0];
  });
}

/// Sum of squared differences between `a` and `b`, as a scalar.
inline Var squared_distance(Var a, Var b) {
  detail::require_same("squared_distance", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return a.tape->record("squared_distance", Tensor::scalar(s), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += 2.0 * g[0] * (av[i] - bv[i]);
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= 2.0 * g[0] * (av[i] - bv[i]);
    }
  });
}

}  // namespace stochca::ops
