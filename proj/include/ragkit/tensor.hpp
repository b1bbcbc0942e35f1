#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "ragkit/common.hpp"
#include "ragkit/rng.hpp"

namespace ragkit {

template <typename T>
struct Node;

// Dense row-major tensor handle. Copies share the underlying buffers; the
// autograd record (node) links an op result back to its inputs.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  Tensor() = default;

  // Grad buffers are allocated eagerly for requires_grad tensors so every
  // copied handle shares the same accumulation buffer.
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(numel_of(t.shape), T(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (numel_of(shape) != values.size())
      throw std::invalid_argument("tensor: shape does not match value count");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  static size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  size_t numel() const { return data ? data->size() : 0; }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : 1); }
  int cols() const { return shape.empty() ? 0 : shape.back(); }

  T& at(size_t i) { return (*data)[i]; }
  T at(size_t i) const { return (*data)[i]; }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
  }
  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  bool all_finite() const {
    for (const T& v : *data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Scalar convenience (1-element tensors).
  T item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return (*data)[0];
  }
};

// Op record: parents + the rule that routes the output gradient to them.
// The node graph forms a DAG; backward() visits each node exactly once.
template <typename T>
struct Node {
  std::vector<Tensor<T>> parents;
  std::function<void(const Tensor<T>&)> backward;
  const char* op = "";
};

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
bool want_grad(const Tensor<T>& t) {
  return grad_enabled() && t.requires_grad;
}

template <typename T>
void attach(Tensor<T>& out, std::vector<Tensor<T>> parents,
            std::function<void(const Tensor<T>&)> fn, const char* op) {
  out.node = std::make_shared<Node<T>>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(fn);
  out.node->op = op;
}

// ---------------------------------------------------------------------------
// Raw matrix kernels (Eigen-backed; row-major f32/f64 buffers).
// ---------------------------------------------------------------------------

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C(m,n) = A(m,k) * B(k,n), optionally accumulating into C.
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  ECMap<T> A(a, m, k);
  ECMap<T> B(b, k, n);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C(m,n) = A(m,k) * B(n,k)^T.
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  ECMap<T> A(a, m, k);
  ECMap<T> B(b, n, k);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C(k,n) = A(m,k)^T * B(m,n).
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  ECMap<T> A(a, m, k);
  ECMap<T> B(b, m, n);
  EMap<T> C(c, k, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename T>
void check_matrix(const Tensor<T>& t, const char* op) {
  if (t.shape.size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a matrix");
}

// Standard product a(m,k) @ b(k,n).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  if (a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: inner dimensions differ");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n}, want_grad(a) || want_grad(b));
  mm_nn(a.data->data(), b.data->data(), out.data->data(), m, k, n, false);
  if (out.requires_grad) {
    attach<T>(out, {a, b},
              [m, k, n](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                Tensor<T>& pb = o.node->parents[1];
                if (pa.requires_grad) {
                  pa.ensure_grad();
                  mm_nt(o.grad->data(), pb.data->data(), pa.grad->data(), m, n, k, true);
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  mm_tn(pa.data->data(), o.grad->data(), pb.grad->data(), m, k, n, true);
                }
              },
              "matmul");
  }
  return out;
}

// a(m,k) @ b(n,k)^T — the attention-score form.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check_matrix(a, "matmul_nt");
  check_matrix(b, "matmul_nt");
  if (a.shape[1] != b.shape[1])
    throw std::invalid_argument("matmul_nt: inner dimensions differ");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor<T> out = Tensor<T>::zeros({m, n}, want_grad(a) || want_grad(b));
  mm_nt(a.data->data(), b.data->data(), out.data->data(), m, k, n, false);
  if (out.requires_grad) {
    attach<T>(out, {a, b},
              [m, k, n](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                Tensor<T>& pb = o.node->parents[1];
                if (pa.requires_grad) {
                  pa.ensure_grad();
                  // dA += dC(m,n) @ B(n,k)
                  mm_nn(o.grad->data(), pb.data->data(), pa.grad->data(), m, n, k, true);
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  // dB += dC(m,n)^T @ A(m,k)
                  mm_tn(o.grad->data(), pa.data->data(), pb.grad->data(), m, n, k, true);
                }
              },
              "matmul_nt");
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape, want_grad(a) || want_grad(b));
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (out.requires_grad) {
    attach<T>(out, {a, b},
              [n](const Tensor<T>& o) {
                for (int p = 0; p < 2; ++p) {
                  Tensor<T>& par = o.node->parents[static_cast<size_t>(p)];
                  if (!par.requires_grad) continue;
                  par.ensure_grad();
                  for (size_t i = 0; i < n; ++i) (*par.grad)[i] += (*o.grad)[i];
                }
              },
              "add");
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("mul: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape, want_grad(a) || want_grad(b));
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (out.requires_grad) {
    attach<T>(out, {a, b},
              [n](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                Tensor<T>& pb = o.node->parents[1];
                if (pa.requires_grad) {
                  pa.ensure_grad();
                  for (size_t i = 0; i < n; ++i)
                    (*pa.grad)[i] += (*o.grad)[i] * (*pb.data)[i];
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  for (size_t i = 0; i < n; ++i)
                    (*pb.grad)[i] += (*o.grad)[i] * (*pa.data)[i];
                }
              },
              "mul");
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape, want_grad(a));
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
  if (out.requires_grad) {
    attach<T>(out, {a},
              [n, s](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                for (size_t i = 0; i < n; ++i) (*pa.grad)[i] += (*o.grad)[i] * s;
              },
              "scale");
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape, want_grad(a));
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) > T(0) ? a.at(i) : T(0);
  if (out.requires_grad) {
    attach<T>(out, {a},
              [n](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                for (size_t i = 0; i < n; ++i)
                  if ((*pa.data)[i] > T(0)) (*pa.grad)[i] += (*o.grad)[i];
              },
              "relu");
  }
  return out;
}

// Row-wise softmax over the last axis of a 1-D or 2-D tensor, computed with
// max-subtraction. Rows must be nonempty.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.shape.empty() || a.shape.back() == 0)
    throw std::invalid_argument("softmax: empty axis");
  const int cols = a.shape.back();
  const int rows = static_cast<int>(a.numel()) / cols;
  Tensor<T> out = Tensor<T>::zeros(a.shape, want_grad(a));
  for (int r = 0; r < rows; ++r) {
    const T* x = a.data->data() + static_cast<size_t>(r) * cols;
    T* y = out.data->data() + static_cast<size_t>(r) * cols;
    T mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double e = std::exp(static_cast<double>(x[j] - mx));
      y[j] = static_cast<T>(e);
      denom += e;
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (int j = 0; j < cols; ++j) y[j] *= inv;
  }
  if (out.requires_grad) {
    attach<T>(out, {a},
              [rows, cols](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                for (int r = 0; r < rows; ++r) {
                  const T* y = o.data->data() + static_cast<size_t>(r) * cols;
                  const T* gy = o.grad->data() + static_cast<size_t>(r) * cols;
                  T* gx = pa.grad->data() + static_cast<size_t>(r) * cols;
                  double dot = 0.0;
                  for (int j = 0; j < cols; ++j)
                    dot += static_cast<double>(gy[j]) * static_cast<double>(y[j]);
                  for (int j = 0; j < cols; ++j)
                    gx[j] += y[j] * (gy[j] - static_cast<T>(dot));
                }
              },
              "softmax");
  }
  return out;
}

// T5-style layer norm: x_i * gain_i / sqrt(mean(x^2) + eps), no mean
// centering, applied per row. gain has length cols.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const int cols = x.shape.back();
  if (static_cast<int>(gain.numel()) != cols)
    throw std::invalid_argument("rms_norm: gain length mismatch");
  const int rows = static_cast<int>(x.numel()) / cols;
  Tensor<T> out = Tensor<T>::zeros(x.shape, want_grad(x) || want_grad(gain));
  std::vector<T> inv_rms(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const T* xr = x.data->data() + static_cast<size_t>(r) * cols;
    T* yr = out.data->data() + static_cast<size_t>(r) * cols;
    double ss = 0.0;
    for (int j = 0; j < cols; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const T ir = static_cast<T>(1.0 / std::sqrt(ss / cols + static_cast<double>(eps)));
    inv_rms[static_cast<size_t>(r)] = ir;
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] * gain.at(static_cast<size_t>(j)) * ir;
  }
  if (out.requires_grad) {
    attach<T>(out, {x, gain},
              [rows, cols, inv_rms](const Tensor<T>& o) {
                Tensor<T>& px = o.node->parents[0];
                Tensor<T>& pg = o.node->parents[1];
                for (int r = 0; r < rows; ++r) {
                  const T* xr = px.data->data() + static_cast<size_t>(r) * cols;
                  const T* gy = o.grad->data() + static_cast<size_t>(r) * cols;
                  const T ir = inv_rms[static_cast<size_t>(r)];
                  if (px.requires_grad) {
                    px.ensure_grad();
                    T* gx = px.grad->data() + static_cast<size_t>(r) * cols;
                    double dot = 0.0;
                    for (int j = 0; j < cols; ++j)
                      dot += static_cast<double>(gy[j]) * pg.at(static_cast<size_t>(j)) * xr[j];
                    const double c = dot * ir * ir * ir / cols;
                    for (int j = 0; j < cols; ++j)
                      gx[j] += gy[j] * pg.at(static_cast<size_t>(j)) * ir -
                               static_cast<T>(c) * xr[j];
                  }
                  if (pg.requires_grad) {
                    pg.ensure_grad();
                    for (int j = 0; j < cols; ++j)
                      (*pg.grad)[static_cast<size_t>(j)] += gy[j] * xr[j] * ir;
                  }
                }
              },
              "rms_norm");
  }
  return out;
}

// Mean negative log-softmax over non-ignored positions.
// logits: (positions, vocab); targets: token ids, ignore_index skipped.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        int ignore_index = -1) {
  check_matrix(logits, "cross_entropy");
  const int P = logits.shape[0], V = logits.shape[1];
  if (static_cast<int>(targets.size()) != P)
    throw std::invalid_argument("cross_entropy: target count mismatch");
  int counted = 0;
  double total = 0.0;
  std::vector<double> log_z(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    const int t = targets[static_cast<size_t>(p)];
    const T* row = logits.data->data() + static_cast<size_t>(p) * V;
    T mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    log_z[static_cast<size_t>(p)] = static_cast<double>(mx) + std::log(z);
    if (t == ignore_index) continue;
    if (t < 0 || t >= V)
      throw std::invalid_argument("cross_entropy: target id out of range");
    total += log_z[static_cast<size_t>(p)] - static_cast<double>(row[t]);
    ++counted;
  }
  if (counted == 0)
    throw std::invalid_argument("cross_entropy: all positions ignored");
  Tensor<T> out = Tensor<T>::from({1}, {static_cast<T>(total / counted)},
                                  want_grad(logits));
  if (out.requires_grad) {
    attach<T>(out, {logits},
              [P, V, targets, ignore_index, counted, log_z](const Tensor<T>& o) {
                Tensor<T>& pl = o.node->parents[0];
                pl.ensure_grad();
                const T g0 = (*o.grad)[0];
                for (int p = 0; p < P; ++p) {
                  const int t = targets[static_cast<size_t>(p)];
                  if (t == ignore_index) continue;
                  const T* row = pl.data->data() + static_cast<size_t>(p) * V;
                  T* grow = pl.grad->data() + static_cast<size_t>(p) * V;
                  const double lz = log_z[static_cast<size_t>(p)];
                  for (int j = 0; j < V; ++j) {
                    double soft = std::exp(static_cast<double>(row[j]) - lz);
                    if (j == t) soft -= 1.0;
                    grow[j] += g0 * static_cast<T>(soft / counted);
                  }
                }
              },
              "cross_entropy");
  }
  return out;
}

// table: (vocab, dim); ids gathered into an (ids.size(), dim) matrix.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  check_matrix(table, "embedding");
  const int V = table.shape[0], D = table.shape[1];
  const int L = static_cast<int>(ids.size());
  if (L == 0) throw std::invalid_argument("embedding: empty id list");
  Tensor<T> out = Tensor<T>::zeros({L, D}, want_grad(table));
  for (int i = 0; i < L; ++i) {
    const int id = ids[static_cast<size_t>(i)];
    if (id < 0 || id >= V)
      throw std::invalid_argument("embedding: id out of range");
    std::copy_n(table.data->data() + static_cast<size_t>(id) * D, D,
                out.data->data() + static_cast<size_t>(i) * D);
  }
  if (out.requires_grad) {
    attach<T>(out, {table},
              [L, D, ids](const Tensor<T>& o) {
                Tensor<T>& pt = o.node->parents[0];
                pt.ensure_grad();
                for (int i = 0; i < L; ++i) {
                  const T* g = o.grad->data() + static_cast<size_t>(i) * D;
                  T* dst = pt.grad->data() +
                           static_cast<size_t>(ids[static_cast<size_t>(i)]) * D;
                  for (int j = 0; j < D; ++j) dst[j] += g[j];
                }
              },
              "embedding");
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int len) {
  check_matrix(a, "slice_rows");
  const int R = a.shape[0], C = a.shape[1];
  if (start < 0 || len <= 0 || start + len > R)
    throw std::invalid_argument("slice_rows: range out of bounds");
  Tensor<T> out = Tensor<T>::zeros({len, C}, want_grad(a));
  std::copy_n(a.data->data() + static_cast<size_t>(start) * C,
              static_cast<size_t>(len) * C, out.data->data());
  if (out.requires_grad) {
    attach<T>(out, {a},
              [start, len, C](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                const size_t n = static_cast<size_t>(len) * C;
                T* dst = pa.grad->data() + static_cast<size_t>(start) * C;
                for (size_t i = 0; i < n; ++i) dst[i] += (*o.grad)[i];
              },
              "slice_rows");
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int start, int len) {
  check_matrix(a, "slice_cols");
  const int R = a.shape[0], C = a.shape[1];
  if (start < 0 || len <= 0 || start + len > C)
    throw std::invalid_argument("slice_cols: range out of bounds");
  Tensor<T> out = Tensor<T>::zeros({R, len}, want_grad(a));
  for (int r = 0; r < R; ++r)
    std::copy_n(a.data->data() + static_cast<size_t>(r) * C + start, len,
                out.data->data() + static_cast<size_t>(r) * len);
  if (out.requires_grad) {
    attach<T>(out, {a},
              [R, C, start, len](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                for (int r = 0; r < R; ++r) {
                  const T* g = o.grad->data() + static_cast<size_t>(r) * len;
                  T* dst = pa.grad->data() + static_cast<size_t>(r) * C + start;
                  for (int j = 0; j < len; ++j) dst[j] += g[j];
                }
              },
              "slice_cols");
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty list");
  const int C = parts[0].shape.back();
  int R = 0;
  bool rg = false;
  for (const auto& p : parts) {
    check_matrix(p, "concat_rows");
    if (p.shape[1] != C)
      throw std::invalid_argument("concat_rows: column mismatch");
    R += p.shape[0];
    rg = rg || want_grad(p);
  }
  Tensor<T> out = Tensor<T>::zeros({R, C}, rg);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data->data(), p.numel(), out.data->data() + off);
    off += p.numel();
  }
  if (out.requires_grad) {
    attach<T>(out, parts,
              [](const Tensor<T>& o) {
                size_t off2 = 0;
                for (auto& p : o.node->parents) {
                  if (p.requires_grad) {
                    p.ensure_grad();
                    for (size_t i = 0; i < p.numel(); ++i)
                      (*p.grad)[i] += (*o.grad)[off2 + i];
                  }
                  off2 += p.numel();
                }
              },
              "concat_rows");
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty list");
  const int R = parts[0].shape[0];
  int C = 0;
  bool rg = false;
  for (const auto& p : parts) {
    check_matrix(p, "concat_cols");
    if (p.shape[0] != R) throw std::invalid_argument("concat_cols: row mismatch");
    C += p.shape[1];
    rg = rg || want_grad(p);
  }
  Tensor<T> out = Tensor<T>::zeros({R, C}, rg);
  int coff = 0;
  for (const auto& p : parts) {
    const int pc = p.shape[1];
    for (int r = 0; r < R; ++r)
      std::copy_n(p.data->data() + static_cast<size_t>(r) * pc, pc,
                  out.data->data() + static_cast<size_t>(r) * C + coff);
    coff += pc;
  }
  if (out.requires_grad) {
    attach<T>(out, parts,
              [R, C](const Tensor<T>& o) {
                int coff2 = 0;
                for (auto& p : o.node->parents) {
                  const int pc = p.shape[1];
                  if (p.requires_grad) {
                    p.ensure_grad();
                    for (int r = 0; r < R; ++r) {
                      const T* g = o.grad->data() + static_cast<size_t>(r) * C + coff2;
                      T* dst = p.grad->data() + static_cast<size_t>(r) * pc;
                      for (int j = 0; j < pc; ++j) dst[j] += g[j];
                    }
                  }
                  coff2 += pc;
                }
              },
              "concat_cols");
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.at(i));
  Tensor<T> out = Tensor<T>::from({1}, {static_cast<T>(s)}, want_grad(a));
  if (out.requires_grad) {
    attach<T>(out, {a},
              [](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                for (size_t i = 0; i < pa.numel(); ++i)
                  (*pa.grad)[i] += (*o.grad)[0];
              },
              "sum");
  }
  return out;
}

// Mean over rows of a (R, C) matrix -> (1, C).
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  check_matrix(a, "mean_rows");
  const int R = a.shape[0], C = a.shape[1];
  Tensor<T> out = Tensor<T>::zeros({1, C}, want_grad(a));
  for (int j = 0; j < C; ++j) {
    double s = 0.0;
    for (int r = 0; r < R; ++r) s += static_cast<double>(a.at(static_cast<size_t>(r) * C + j));
    out.at(static_cast<size_t>(j)) = static_cast<T>(s / R);
  }
  if (out.requires_grad) {
    attach<T>(out, {a},
              [R, C](const Tensor<T>& o) {
                Tensor<T>& pa = o.node->parents[0];
                pa.ensure_grad();
                for (int r = 0; r < R; ++r)
                  for (int j = 0; j < C; ++j)
                    (*pa.grad)[static_cast<size_t>(r) * C + j] +=
                        (*o.grad)[static_cast<size_t>(j)] / static_cast<T>(R);
              },
              "mean_rows");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward traversal
// ---------------------------------------------------------------------------

template <typename T>
void collect_topo(const Tensor<T>& t, std::unordered_set<const Node<T>*>& seen,
                  std::vector<Tensor<T>>& order) {
  if (!t.node || seen.count(t.node.get())) return;
  seen.insert(t.node.get());
  for (const auto& p : t.node->parents) collect_topo(p, seen, order);
  order.push_back(t);
}

// Populates grad buffers on every tensor reachable from loss. Each op node's
// rule runs exactly once, in reverse topological order.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  if (!loss.node) {
    if (!loss.requires_grad)
      throw std::invalid_argument("backward: loss is detached from the graph");
    const_cast<Tensor<T>&>(loss).ensure_grad();
    (*loss.grad)[0] += T(1);
    return;
  }
  std::unordered_set<const Node<T>*> seen;
  std::vector<Tensor<T>> order;
  collect_topo(loss, seen, order);
  const_cast<Tensor<T>&>(loss).ensure_grad();
  (*loss.grad)[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!it->grad) const_cast<Tensor<T>&>(*it).ensure_grad();
    it->node->backward(*it);
  }
}

}  // namespace ragkit
