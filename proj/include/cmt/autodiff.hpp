// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tape records every operation executed through it. Each recorded node
// keeps its forward value, a lazily allocated gradient accumulator, and a
// closure that pushes its output gradient into its parents. backward()
// walks the nodes once, in reverse execution order.
//
// Reductions always run with the innermost index ascending, so every
// result is bit-reproducible and comparable exactly against naive loops.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmt/error.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  /// With record=false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Trainable input; gradients accumulate into it.
  Var leaf(Tensor value) { return add_node(std::move(value), record_, {}); }

  /// Input that never receives a gradient.
  Var constant(Tensor value) { return add_node(std::move(value), false, {}); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient accumulator, zero-allocated on first access.
  Tensor& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }

  /// Records an operation result. `fn` is dropped unless some parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id].needs_grad;
    Var out = add_node(std::move(value), needs, {});
    if (needs) nodes_[out.id].backward = std::move(fn);
    return out;
  }

  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id].needs_grad;
    Var out = add_node(std::move(value), needs, {});
    if (needs) nodes_[out.id].backward = std::move(fn);
    return out;
  }

  /// Seeds d(root)/d(root) = 1 and replays the tape backward.
  /// Root must hold a single element.
  void backward(Var root) {
    if (!record_) throw ConfigError("backward() on a non-recording tape");
    if (nodes_[root.id].value.size() != 1)
      throw DimensionError("backward() needs a scalar root, got " +
                           shape_str(nodes_[root.id].value.shape()));
    grad_ref(root.id)[0] += 1.0;
    backward_visits_ = 0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      ++backward_visits_;
      n.backward(*this, i);
    }
  }

  /// Number of backward closures run by the last backward() call.
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var add_node(Tensor value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::size_t backward_visits_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

/// C = A * B with C[i][j] accumulated over l ascending from 0.0.
inline Tensor matmul_raw(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n}, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double x = A[i * k + l];
      const double* brow = B + l * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += x * brow[j];
    }
  return c;
}

inline void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace detail

/// Tanh-approximation GELU of a scalar.
inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
}

inline double gelu_derivative(double x) {
  const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
}

// --- operations -----------------------------------------------------------

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(A.shape()) + " by " + shape_str(B.shape()));
  return a.tape->record(detail::matmul_raw(A, B), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad_ref(self);
    const Tensor& Av = t.value(a.id);
    const Tensor& Bv = t.value(b.id);
    const std::size_t m = Av.dim(0), k = Av.dim(1), n = Bv.dim(1);
    if (t.needs_grad(a.id)) {
      Tensor& dA = t.grad_ref(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += dC[i * n + j] * Bv[l * n + j];
          dA[i * k + l] += s;
        }
    }
    if (t.needs_grad(b.id)) {
      Tensor& dB = t.grad_ref(b.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const double x = Av[i * k + l];
          for (std::size_t j = 0; j < n; ++j) dB[l * n + j] += x * dC[i * n + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_2d(A, "transpose");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return a.tape->record(std::move(out), {a}, [a, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& dA = t.grad_ref(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += g[j * m + i];
  });
}

inline Var add(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    for (Var p : {a, b}) {
      if (!t.needs_grad(p.id)) continue;
      Tensor& d = t.grad_ref(p.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& Av = t.value(a.id);
    const Tensor& Bv = t.value(b.id);
    if (t.needs_grad(a.id)) {
      Tensor& d = t.grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * Bv[i];
    }
    if (t.needs_grad(b.id)) {
      Tensor& d = t.grad_ref(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * Av[i];
    }
  });
}

/// Adds a length-n bias to every row of an m x n matrix.
inline Var add_row(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  detail::require_2d(A, "add_row");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (b.size() != n)
    throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not fit rows of " + shape_str(A.shape()));
  Tensor out = A;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return a.tape->record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    if (t.needs_grad(a.id)) {
      Tensor& d = t.grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (t.needs_grad(bias.id)) {
      Tensor& d = t.grad_ref(bias.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

/// Sum of all elements, as a [1] tensor.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad_ref(self)[0];
    Tensor& d = t.grad_ref(a.id);
    for (auto& v : d.data()) v += g;
  });
}

/// Column means of an m x n matrix, as [1 x n].
inline Var mean_rows(Var a) {
  const Tensor& A = a.value();
  detail::require_2d(A, "mean_rows");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor out({1, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += A[i * n + j];
  for (auto& v : out.data()) v /= static_cast<double>(m);
  return a.tape->record(std::move(out), {a}, [a, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(a.id);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += g[j] * inv;
  });
}

/// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows_raw(const Tensor& X) {
  const std::size_t m = X.rows(), n = X.cols();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = X.data().data() + i * n;
    double* y = Y.data().data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return Y;
}

inline Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  if (X.ndim() > 2) throw DimensionError("softmax_rows expects a 1-D or 2-D tensor, got " + shape_str(X.shape()));
  return x.tape->record(softmax_rows_raw(X), {x}, [x](Tape& t, std::size_t self) {
    const Tensor& Y = t.value(self);
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(x.id);
    const std::size_t m = Y.rows(), n = Y.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += Y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

/// Normalizes each last-axis slice of x, then applies gamma/beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = x.value();
  const std::size_t d = X.cols();
  if (gamma.value().size() != d || beta.value().size() != d)
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.value().shape()) + " do not match last dim of " +
                         shape_str(X.shape()));
  const std::size_t m = X.size() / d;
  Tensor Y(X.shape());
  std::vector<double> xhat(X.size()), rstd(m);
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = X.data().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xr[j] - mean) * rstd[i];
      Y[i * d + j] = xhat[i * d + j] * G[j] + B[j];
    }
  }
  return x.tape->record(std::move(Y), {x, gamma, beta},
                        [x, gamma, beta, d, m, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad_ref(self);
                          const Tensor& G = t.value(gamma.id);
                          if (t.needs_grad(gamma.id)) {
                            Tensor& dg = t.grad_ref(gamma.id);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat[i * d + j];
                          }
                          if (t.needs_grad(beta.id)) {
                            Tensor& db = t.grad_ref(beta.id);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
                          }
                          if (t.needs_grad(x.id)) {
                            Tensor& dx = t.grad_ref(x.id);
                            const double inv_d = 1.0 / static_cast<double>(d);
                            for (std::size_t i = 0; i < m; ++i) {
                              double s1 = 0.0, s2 = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                const double dxh = g[i * d + j] * G[j];
                                s1 += dxh;
                                s2 += dxh * xhat[i * d + j];
                              }
                              for (std::size_t j = 0; j < d; ++j) {
                                const double dxh = g[i * d + j] * G[j];
                                dx[i * d + j] += rstd[i] * (dxh - s1 * inv_d - xhat[i * d + j] * s2 * inv_d);
                              }
                            }
                          }
                        });
}

inline Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = gelu_scalar(v);
  return x.tape->record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& X = t.value(x.id);
    Tensor& d = t.grad_ref(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * gelu_derivative(X[i]);
  });
}

/// Inverted dropout. Inference mode (or rate 0) returns `x` itself, so the
/// output is bit-identical to the input.
inline Var dropout(Var x, double rate, bool training, Rng& rng) {
  detail::check_rate(rate);
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(x.value().shape());
  for (auto& m : mask.data()) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
  });
}

/// Columns [start, start + width) of a matrix.
inline Var slice_cols(Var x, std::size_t start, std::size_t width) {
  const Tensor& X = x.value();
  detail::require_2d(X, "slice_cols");
  const std::size_t m = X.dim(0), n = X.dim(1);
  if (width == 0 || start + width > n)
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + width) +
                         ") out of range for " + shape_str(X.shape()));
  Tensor out({m, width});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = X[i * n + start + j];
  return x.tape->record(std::move(out), {x}, [x, m, n, start, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(x.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width; ++j) d[i * n + start + j] += g[i * width + j];
  });
}

/// Side-by-side concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts[0].value().rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    detail::require_2d(p.value(), "concat_cols");
    if (p.value().dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    n += p.value().dim(1);
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    const std::size_t w = P.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = P[i * w + j];
    off += w;
  }
  return parts[0].tape->record(std::move(out), parts, [parts, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = t.value(p.id).dim(1);
      if (t.needs_grad(p.id)) {
        Tensor& d = t.grad_ref(p.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) d[i * w + j] += g[i * n + off + j];
      }
      off += w;
    }
  });
}

/// Vertical concatenation of matrices (or 1-D rows) with equal widths.
inline Var stack_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("stack_rows of nothing");
  const std::size_t n = parts[0].value().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.value().ndim() > 2 || p.value().cols() != n) throw DimensionError("stack_rows: widths differ");
    m += p.value().rows();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto& d = p.value().data();
    std::copy(d.begin(), d.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += d.size();
  }
  return parts[0].tape->record(std::move(out), parts, [parts](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t len = t.value(p.id).size();
      if (t.needs_grad(p.id)) {
        Tensor& d = t.grad_ref(p.id);
        for (std::size_t i = 0; i < len; ++i) d[i] += g[off + i];
      }
      off += len;
    }
  });
}

/// Rows of `table` picked by index (embedding lookup). Repeated ids accumulate.
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const Tensor& T = table.value();
  detail::require_2d(T, "gather_rows");
  const std::size_t n = T.dim(1);
  for (auto id : ids)
    if (id >= T.dim(0))
      throw InputError("gather_rows: row " + std::to_string(id) + " out of range for " + shape_str(T.shape()));
  if (ids.empty()) throw DimensionError("gather_rows with no rows");
  Tensor out({ids.size(), n});
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = T[ids[r] * n + j];
  return table.tape->record(std::move(out), {table}, [table, ids = std::move(ids), n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(table.id);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) d[ids[r] * n + j] += g[r * n + j];
  });
}

/// First `count` rows of a matrix.
inline Var head_rows(Var x, std::size_t count) {
  const Tensor& X = x.value();
  detail::require_2d(X, "head_rows");
  if (count == 0 || count > X.dim(0))
    throw DimensionError("head_rows: " + std::to_string(count) + " rows requested from " + shape_str(X.shape()));
  std::vector<std::size_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = i;
  return gather_rows(x, std::move(ids));
}

/// Copy of `x` with the listed rows overwritten by the single row `fill`.
inline Var replace_rows(Var x, std::vector<std::size_t> rows, Var fill) {
  const Tensor& X = x.value();
  detail::require_2d(X, "replace_rows");
  const std::size_t m = X.dim(0), n = X.dim(1);
  if (fill.value().size() != n) throw DimensionError("replace_rows: fill width mismatch");
  std::vector<char> replaced(m, 0);
  for (auto r : rows) {
    if (r >= m) throw DimensionError("replace_rows: row out of range");
    replaced[r] = 1;
  }
  Tensor out = X;
  for (std::size_t r = 0; r < m; ++r)
    if (replaced[r])
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] = fill.value()[j];
  return x.tape->record(std::move(out), {x, fill}, [x, fill, replaced = std::move(replaced), m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    if (t.needs_grad(x.id)) {
      Tensor& d = t.grad_ref(x.id);
      for (std::size_t r = 0; r < m; ++r)
        if (!replaced[r])
          for (std::size_t j = 0; j < n; ++j) d[r * n + j] += g[r * n + j];
    }
    if (t.needs_grad(fill.id)) {
      Tensor& d = t.grad_ref(fill.id);
      for (std::size_t r = 0; r < m; ++r)
        if (replaced[r])
          for (std::size_t j = 0; j < n; ++j) d[j] += g[r * n + j];
    }
  });
}

/// Sliding windows over the rows of a [T x c] signal: row f holds
/// x[f*stride .. f*stride+kernel) flattened (time-major, then channel).
inline Var im2col1d(Var x, std::size_t kernel, std::size_t stride) {
  const Tensor& X = x.value();
  detail::require_2d(X, "im2col1d");
  const std::size_t T = X.dim(0), c = X.dim(1);
  if (kernel == 0 || stride == 0) throw ConfigError("im2col1d: kernel and stride must be positive");
  if (T < kernel)
    throw DimensionError("input too short: " + std::to_string(T) + " frames, minimum " + std::to_string(kernel));
  const std::size_t F = (T - kernel) / stride + 1;
  const std::size_t w = kernel * c;
  Tensor out({F, w});
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t k = 0; k < kernel; ++k)
      for (std::size_t ch = 0; ch < c; ++ch) out[f * w + k * c + ch] = X[(f * stride + k) * c + ch];
  return x.tape->record(std::move(out), {x}, [x, F, kernel, stride, c, w](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(x.id);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t k = 0; k < kernel; ++k)
        for (std::size_t ch = 0; ch < c; ++ch) d[(f * stride + k) * c + ch] += g[f * w + k * c + ch];
  });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_ref(self);
    Tensor& d = t.grad_ref(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

/// log(sum(exp(z))) with max subtraction.
inline double log_sum_exp(std::span<const double> z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

/// -log softmax(logits)[label], computed through log-sum-exp.
inline Var cross_entropy_logits(Var logits, std::size_t label) {
  const Tensor& Z = logits.value();
  if (Z.rows() != 1) throw DimensionError("cross_entropy expects one row of logits, got " + shape_str(Z.shape()));
  const std::size_t C = Z.size();
  if (label >= C)
    throw InputError("label " + std::to_string(label) + " out of range for " + std::to_string(C) + " classes");
  const double lse = log_sum_exp(Z.data());
  const double loss = lse - Z[label];
  return logits.tape->record(Tensor::scalar(loss), {logits}, [logits, label, lse, C](Tape& t, std::size_t self) {
    const double g = t.grad_ref(self)[0];
    const Tensor& Z = t.value(logits.id);
    Tensor& d = t.grad_ref(logits.id);
    for (std::size_t j = 0; j < C; ++j) d[j] += g * (std::exp(Z[j] - lse) - (j == label ? 1.0 : 0.0));
  });
}

/// Mean squared difference; `target` is treated as a constant.
inline Var mse(Var pred, const Tensor& target) {
  detail::require_same(pred.value(), target, "mse");
  const Tensor& P = pred.value();
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) s += (P[i] - target[i]) * (P[i] - target[i]);
  const double n = static_cast<double>(P.size());
  return pred.tape->record(Tensor::scalar(s / n), {pred}, [pred, target, n](Tape& t, std::size_t self) {
    const double g = t.grad_ref(self)[0];
    const Tensor& P = t.value(pred.id);
    Tensor& d = t.grad_ref(pred.id);
    for (std::size_t i = 0; i < P.size(); ++i) d[i] += g * 2.0 * (P[i] - target[i]) / n;
  });
}

}  // namespace cmt
