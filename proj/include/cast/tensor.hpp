#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tape owns every value produced while it records. Ops append a node with
// the output value and a backward closure; Tape::backward walks the nodes in
// reverse execution order and sums contributions into each input gradient.
// All reductions run sequentially in a fixed order, so replaying the same
// computation gives bitwise-identical values and gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <cblas.h>

#include "cast/error.hpp"
#include "cast/rng.hpp"

namespace cast::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename T>
struct Tensor {
  static_assert(std::is_floating_point_v<T>);
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("buffer of " + std::to_string(data.size()) + " values does not fit shape " +
                       shape_str(shape));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  T item() const { return value().item(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the op's own output value and the gradient flowing into it.
  using Backward = std::function<void(Tape&, const Tensor<T>& out, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // With recording off, ops compute values only (inference).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, {}); }

  Var<T> leaf(Tensor<T> value, bool requires_grad, std::string name = {}) {
    return push(std::move(value), nullptr, requires_grad && recording_, std::move(name));
  }

  // Trainable leaf that reads an externally owned tensor (no copy). One leaf
  // per name per tape; the referenced tensor must outlive the tape.
  Var<T> param(const std::string& name, const Tensor<T>& external) {
    if (auto it = params_.find(name); it != params_.end()) return Var<T>(this, it->second);
    Var<T> v = push(Tensor<T>{}, &external, recording_, name);
    params_.emplace(name, v.id());
    return v;
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    needs = needs && recording_;
    Var<T> v = push(std::move(value), nullptr, needs, {});
    if (needs) nodes_[v.id()].backward = std::move(fn);
    return v;
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id()];
    return n.external != nullptr ? *n.external : n.value;
  }

  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }

  // Gradient accumulator of `v`, zero-initialized on first use.
  Tensor<T>& grad_ref(const Var<T>& v) {
    Node& n = nodes_[v.id()];
    if (n.grad.data.empty()) n.grad = Tensor<T>(value(v).shape);
    return n.grad;
  }

  const Tensor<T>* grad(const Var<T>& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id()];
    return n.grad.data.empty() ? nullptr : &n.grad;
  }

  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw Error("backward: loss was not recorded on this tape");
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape));
    }
    if (!nodes_[loss.id()].requires_grad) throw Error("backward: loss does not depend on any trainable tensor");
    grad_ref(loss).data[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.data.empty()) continue;
      n.backward(*this, n.value, n.grad);
    }
  }

  // Gradients of named trainable leaves, zero for leaves the loss ignores.
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.name.empty() || !n.requires_grad) continue;
      const Tensor<T>& val = n.external != nullptr ? *n.external : n.value;
      out[n.name] = n.grad.data.empty() ? Tensor<T>(val.shape) : n.grad;
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  void check_owner(const Var<T>& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw Error("tensor was created outside this tape");
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    std::string name;
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* external, bool requires_grad, std::string name) {
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  bool recording_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  if (tape_ == nullptr) throw Error("use of an empty Var");
  return tape_->value(*this);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_ != nullptr && tape_->requires_grad(*this);
}

namespace detail {

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw Error("tensor was created outside this tape");
  return *a.tape();
}

// Dense kernels go through CBLAS (single-threaded OpenBLAS): the summation
// order is then fixed for a given machine, which the determinism contract
// needs, and the small per-example products stay fast.
inline void blas_single_thread() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

template <typename T>
void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  blas_single_thread();
  const auto M = static_cast<blasint>(m), N = static_cast<blasint>(n), K = static_cast<blasint>(k);
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, M, N, K, 1.0f, a, static_cast<blasint>(lda), b, static_cast<blasint>(ldb), 1.0f,
                c, static_cast<blasint>(ldc));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, ta, tb, M, N, K, 1.0, a, static_cast<blasint>(lda), b, static_cast<blasint>(ldb), 1.0, c,
                static_cast<blasint>(ldc));
  } else {
    // Extended precision (finite-difference reference runs): plain loops.
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == CblasNoTrans ? a[i * lda + p] : a[p * lda + i];
        for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += av * (tb == CblasNoTrans ? b[p * ldb + j] : b[j * ldb + p]);
      }
  }
}

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(CblasNoTrans, CblasNoTrans, m, n, k, a, k, b, n, c, n);
}

// C[m,k] += G[m,n] B[k,n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(CblasNoTrans, CblasTrans, m, k, n, g, n, b, n, c, k);
}

// C[k,n] += A[m,k]^T G[m,n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(CblasTrans, CblasNoTrans, k, n, m, a, k, g, n, c, n);
}

}  // namespace detail

// a [..., m, k] times b [k, n] or [..., k, n] with the same leading dims.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.rank() < 2 || B.rank() < 2 || A.shape[A.rank() - 1] != B.shape[B.rank() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  }
  const std::size_t m = A.shape[A.rank() - 2];
  const std::size_t k = A.shape[A.rank() - 1];
  const std::size_t n = B.shape[B.rank() - 1];
  const std::size_t batch = A.size() / (m * k);
  const bool shared_b = B.rank() == 2;
  if (!shared_b && (B.rank() != A.rank() || !std::equal(A.shape.begin(), A.shape.end() - 2, B.shape.begin()))) {
    throw ShapeError("matmul: batch dimensions of " + shape_str(A.shape) + " and " + shape_str(B.shape) +
                     " do not broadcast");
  }
  Shape out_shape(A.shape.begin(), A.shape.end() - 1);
  out_shape.push_back(n);
  Tensor<T> C(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm_nn(A.data.data() + bi * m * k, B.data.data() + (shared_b ? 0 : bi * k * n),
                    C.data.data() + bi * m * n, m, k, n);
  }
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n, batch, shared_b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    if (a.requires_grad()) {
      Tensor<T>& ga = t.grad_ref(a);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::gemm_nt(g.data.data() + bi * m * n, B.data.data() + (shared_b ? 0 : bi * k * n),
                        ga.data.data() + bi * m * k, m, k, n);
      }
    }
    if (b.requires_grad()) {
      Tensor<T>& gb = t.grad_ref(b);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::gemm_tn(A.data.data() + bi * m * k, g.data.data() + bi * m * n,
                        gb.data.data() + (shared_b ? 0 : bi * k * n), m, k, n);
      }
    }
  });
}

// Swaps the last two dimensions.
template <typename T>
Var<T> transpose(const Var<T>& a) {
  const Tensor<T>& A = a.value();
  if (A.rank() < 2) throw ShapeError("transpose: rank < 2, shape " + shape_str(A.shape));
  const std::size_t r = A.shape[A.rank() - 2];
  const std::size_t c = A.shape[A.rank() - 1];
  const std::size_t batch = A.size() / std::max<std::size_t>(r * c, 1);
  Shape s = A.shape;
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor<T> out(s);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[bi * r * c + j * r + i] = A.data[bi * r * c + i * c + j];
  return a.tape()->record(std::move(out), {a}, [a, r, c, batch](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_ref(a);
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga.data[bi * r * c + i * c + j] += g.data[bi * r * c + j * r + i];
  });
}

// a + b, where b's shape equals a's or is a suffix of it (bias broadcast).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (B.rank() > A.rank() || !std::equal(B.shape.begin(), B.shape.end(), A.shape.end() - static_cast<std::ptrdiff_t>(B.rank()))) {
    throw ShapeError("add: cannot broadcast " + shape_str(B.shape) + " onto " + shape_str(A.shape));
  }
  const std::size_t inner = B.size();
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i % inner];
  return tape.record(std::move(out), {a, b}, [a, b, inner](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    if (a.requires_grad()) {
      Tensor<T>& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (b.requires_grad()) {
      Tensor<T>& gb = t.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % inner] += g.data[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.shape != B.shape) throw ShapeError("mul: shapes " + shape_str(A.shape) + " and " + shape_str(B.shape) + " differ");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    if (a.requires_grad()) {
      Tensor<T>& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * B.data[i];
    }
    if (b.requires_grad()) {
      Tensor<T>& gb = t.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * A.data[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x *= factor;
  return a.tape()->record(std::move(out), {a}, [a, factor](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * factor;
  });
}

// Sum of all elements, as a rank-0 tensor.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T x : a.value().data) s += x;
  return a.tape()->record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_ref(a);
    for (auto& x : ga.data) x += g.data[0];
  });
}

template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  return sum(mul(a, b));
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2));
  return a.tape()->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    const Tensor<T>& A = a.value();
    Tensor<T>& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = A.data[i];
      const T d = T(0.5) * (T(1) + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
      ga.data[i] += g.data[i] * d;
    }
  });
}

// Max-subtracted softmax along `axis`.
template <typename T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
  const Tensor<T>& A = a.value();
  if (axis >= A.rank()) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(A.shape));
  const std::size_t n = A.shape[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < A.rank(); ++i) inner *= A.shape[i];
  const std::size_t outer = A.size() / std::max<std::size_t>(n * inner, 1);
  Tensor<T> out(A.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, A.data[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(A.data[base + j * inner] - mx);
        out.data[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out.data[base + j * inner] /= total;
    }
  }
  return a.tape()->record(std::move(out), {a}, [a, n, inner, outer](Tape<T>& t, const Tensor<T>& Y, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_ref(a);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += g.data[base + j * inner] * Y.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          ga.data[idx] += Y.data[idx] * (g.data[idx] - s);
        }
      }
    }
  });
}


// Softmax over the last axis where positions with mask == 0 are excluded and
// get probability exactly 0. `mask` has the shape of the last two dims
// [rows, cols] and is broadcast over any leading dims.
template <typename T>
Var<T> masked_softmax(const Var<T>& a, std::span<const std::uint8_t> mask) {
  const Tensor<T>& A = a.value();
  if (A.rank() < 2) throw ShapeError("masked_softmax: rank < 2, shape " + shape_str(A.shape));
  const std::size_t rows = A.shape[A.rank() - 2];
  const std::size_t cols = A.shape[A.rank() - 1];
  if (mask.size() != rows * cols) throw ShapeError("masked_softmax: mask does not match " + shape_str(A.shape));
  for (std::size_t r = 0; r < rows; ++r) {
    if (std::none_of(mask.begin() + static_cast<std::ptrdiff_t>(r * cols),
                     mask.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), [](std::uint8_t m) { return m != 0; })) {
      throw Error("no attendable source positions");
    }
  }
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  const std::size_t batch = A.size() / std::max<std::size_t>(rows * cols, 1);
  Tensor<T> out(A.shape);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* x = A.data.data() + (b * rows + r) * cols;
      T* y = out.data.data() + (b * rows + r) * cols;
      const std::uint8_t* m = keep.data() + r * cols;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < cols; ++j)
        if (m[j]) mx = std::max(mx, x[j]);
      T total = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        if (!m[j]) continue;
        y[j] = std::exp(x[j] - mx);
        total += y[j];
      }
      for (std::size_t j = 0; j < cols; ++j)
        if (m[j]) y[j] /= total;
    }
  }
  return a.tape()->record(std::move(out), {a}, [a, keep = std::move(keep), rows, cols, batch](Tape<T>& t, const Tensor<T>& Y, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_ref(a);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = (b * rows + r) * cols;
        const std::uint8_t* m = keep.data() + r * cols;
        T s = 0;
        for (std::size_t j = 0; j < cols; ++j)
          if (m[j]) s += g.data[base + j] * Y.data[base + j];
        for (std::size_t j = 0; j < cols; ++j)
          if (m[j]) ga.data[base + j] += Y.data[base + j] * (g.data[base + j] - s);
      }
    }
  });
}

// Normalizes over the last dimension (biased 1/N variance), then applies
// gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const Tensor<T>& X = x.value();
  const std::size_t n = X.shape.empty() ? 1 : X.shape.back();
  if (gain.value().shape != Shape{n} || bias.value().shape != Shape{n}) {
    throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
  }
  const std::size_t rows = X.size() / std::max<std::size_t>(n, 1);
  const Tensor<T>& G = gain.value();
  const Tensor<T>& B = bias.value();
  Tensor<T> out(X.shape);
  std::vector<T> xhat(X.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = X.data.data() + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * rstd[r];
      out.data[r * n + j] = xhat[r * n + j] * G.data[j] + B.data[j];
    }
  }
  return x.tape()->record(std::move(out), {x, gain, bias},
                          [x, gain, bias, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                              Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    const Tensor<T>& G = gain.value();
    if (gain.requires_grad()) {
      Tensor<T>& gg = t.grad_ref(gain);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gg.data[j] += g.data[r * n + j] * xhat[r * n + j];
    }
    if (bias.requires_grad()) {
      Tensor<T>& gb = t.grad_ref(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb.data[j] += g.data[r * n + j];
    }
    if (x.requires_grad()) {
      Tensor<T>& gx = t.grad_ref(x);
      const T inv_n = T(1) / static_cast<T>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        T sum_d = 0;
        T sum_dx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g.data[r * n + j] * G.data[j];
          sum_d += d;
          sum_dx += d * xhat[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g.data[r * n + j] * G.data[j];
          gx.data[r * n + j] += rstd[r] * (d - inv_n * sum_d - xhat[r * n + j] * inv_n * sum_dx);
        }
      }
    }
  });
}

// Rows of `table` [V, d] selected by `ids`, giving [len, d].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  const Tensor<T>& W = table.value();
  if (W.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(W.shape));
  const std::size_t vocab = W.shape[0];
  const std::size_t d = W.shape[1];
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Tensor<T> out(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw ReferenceError("embedding: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(W.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[i]) * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return table.tape()->record(std::move(out), {table}, [table, idx = std::move(idx), d](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gw = t.grad_ref(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gw.data[static_cast<std::size_t>(idx[i]) * d + j] += g.data[i * d + j];
  });
}

// [len, heads * dh] -> [heads, len, dh]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const Tensor<T>& X = x.value();
  if (X.rank() != 2 || heads == 0 || X.shape[1] % heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_str(X.shape) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t len = X.shape[0];
  const std::size_t dh = X.shape[1] / heads;
  Tensor<T> out(Shape{heads, len, dh});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < dh; ++j) out.data[(h * len + l) * dh + j] = X.data[l * heads * dh + h * dh + j];
  return x.tape()->record(std::move(out), {x}, [x, heads, len, dh](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_ref(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t j = 0; j < dh; ++j) gx.data[l * heads * dh + h * dh + j] += g.data[(h * len + l) * dh + j];
  });
}

// [heads, len, dh] -> [len, heads * dh]
template <typename T>
Var<T> merge_heads(const Var<T>& x) {
  const Tensor<T>& X = x.value();
  if (X.rank() != 3) throw ShapeError("merge_heads: expected rank 3, got " + shape_str(X.shape));
  const std::size_t heads = X.shape[0];
  const std::size_t len = X.shape[1];
  const std::size_t dh = X.shape[2];
  Tensor<T> out(Shape{len, heads * dh});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < dh; ++j) out.data[l * heads * dh + h * dh + j] = X.data[(h * len + l) * dh + j];
  return x.tape()->record(std::move(out), {x}, [x, heads, len, dh](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_ref(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t j = 0; j < dh; ++j) gx.data[(h * len + l) * dh + j] += g.data[l * heads * dh + h * dh + j];
  });
}

// Inverted dropout; identity when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, T p, SplitMix64& rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw ConfigError("dropout probability must be below 1");
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> factor(x.value().size());
  for (auto& f : factor) f = rng.uniform() >= static_cast<double>(p) ? keep_scale : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= factor[i];
  return x.tape()->record(std::move(out), {x}, [x, factor = std::move(factor)](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * factor[i];
  });
}

enum class Reduction { mean, sum };

// Token-level cross entropy of logits [positions, V] against target ids.
// Positions whose target equals `ignore_id` add nothing to loss or gradient.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets, std::int32_t ignore_id,
                     Reduction reduction = Reduction::mean) {
  const Tensor<T>& L = logits.value();
  if (L.rank() != 2) throw ShapeError("cross_entropy: logits must be [positions, V], got " + shape_str(L.shape));
  const std::size_t positions = L.shape[0];
  const std::size_t vocab = L.shape[1];
  if (targets.size() != positions) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(positions) + " positions");
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (auto id : tgt) {
    if (id == ignore_id) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ReferenceError("cross_entropy: target " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw Error("no supervised positions");
  std::vector<T> probs(positions * vocab, T(0));
  T total = 0;
  for (std::size_t p = 0; p < positions; ++p) {
    if (tgt[p] == ignore_id) continue;
    const T* row = L.data.data() + p * vocab;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[p * vocab + j] = std::exp(row[j] - mx);
      z += probs[p * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[p * vocab + j] /= z;
    total += mx + std::log(z) - row[static_cast<std::size_t>(tgt[p])];
  }
  const T norm = reduction == Reduction::mean ? T(1) / static_cast<T>(count) : T(1);
  return logits.tape()->record(Tensor<T>::scalar(total * norm), {logits},
                               [logits, tgt = std::move(tgt), probs = std::move(probs), ignore_id, vocab, norm](
                                   Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gl = t.grad_ref(logits);
    const T scale = g.data[0] * norm;
    for (std::size_t p = 0; p < tgt.size(); ++p) {
      if (tgt[p] == ignore_id) continue;
      for (std::size_t j = 0; j < vocab; ++j) gl.data[p * vocab + j] += scale * probs[p * vocab + j];
      gl.data[p * vocab + static_cast<std::size_t>(tgt[p])] -= scale;
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
//
// `f` builds a scalar on the tape it is given and must read every checked
// tensor through tape.param(name, tensor). Each coordinate is perturbed in
// place by +-eps and the central difference compared with the analytic
// gradient; the result is the largest
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).

template <typename T>
using ScalarFn = std::function<Var<T>(Tape<T>&)>;

template <typename T>
using Inputs = std::vector<std::pair<std::string, Tensor<T>*>>;

namespace detail {

template <typename T>
double evaluate_scalar(const ScalarFn<T>& f) {
  Tape<T> tape;
  tape.set_recording(false);
  return static_cast<double>(f(tape).item());
}

template <typename T>
std::map<std::string, Tensor<T>> analytic_gradients(const ScalarFn<T>& f) {
  Tape<T> tape;
  Var<T> out = f(tape);
  if (out.value().size() != 1) throw ShapeError("finite_diff_check: function must return a scalar");
  if (!out.requires_grad()) return {};
  tape.backward(out);
  return tape.gradients();
}

template <typename T>
void require_deterministic(const ScalarFn<T>& f) {
  const double base1 = evaluate_scalar(f);
  const double base2 = evaluate_scalar(f);
  if (std::memcmp(&base1, &base2, sizeof base1) != 0) {
    throw Error("finite_diff_check: function is not deterministic");
  }
}

}  // namespace detail

// Analytic gradients come from `f` in T. Central differences come from
// `f_ref`, the same function in a type R at least as wide, reading the
// tensors of `ref_inputs` (same names, shapes and values as `inputs`).
template <typename T, typename R>
double finite_diff_check(const ScalarFn<T>& f, const Inputs<T>& inputs, const ScalarFn<R>& f_ref,
                         const Inputs<R>& ref_inputs, double eps) {
  if (!(eps > 0)) throw ConfigError("finite_diff_check: eps must be positive");
  if (inputs.size() != ref_inputs.size()) throw ShapeError("finite_diff_check: input lists differ");
  detail::require_deterministic(f);
  detail::require_deterministic(f_ref);
  const auto analytic = detail::analytic_gradients(f);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& [name, tensor] = inputs[k];
    Tensor<R>* ref = ref_inputs[k].second;
    if (ref->size() != tensor->size()) throw ShapeError("finite_diff_check: size mismatch for " + name);
    auto it = analytic.find(name);
    for (std::size_t i = 0; i < ref->size(); ++i) {
      const R saved = ref->data[i];
      ref->data[i] = saved + static_cast<R>(eps);
      Tape<R> up_tape;
      up_tape.set_recording(false);
      const R up = f_ref(up_tape).item();
      ref->data[i] = saved - static_cast<R>(eps);
      Tape<R> down_tape;
      down_tape.set_recording(false);
      const R down = f_ref(down_tape).item();
      ref->data[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<R>(eps)));
      const double exact = it == analytic.end() ? 0.0 : static_cast<double>(it->second.data[i]);
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
  }
  return worst;
}

// Same-precision form: numeric and analytic gradients both from `f`.
template <typename T>
double finite_diff_check(const ScalarFn<T>& f, const Inputs<T>& inputs, double eps) {
  return finite_diff_check<T, T>(f, inputs, f, inputs, eps);
}

// Single-tensor form: f receives the checked tensor as a trainable leaf.
template <typename T>
double finite_diff_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, Tensor<T> x, double eps) {
  Tensor<T> owned = std::move(x);
  ScalarFn<T> wrapped = [&](Tape<T>& tape) { return f(tape, tape.param("x", owned)); };
  return finite_diff_check<T>(wrapped, Inputs<T>{{"x", &owned}}, eps);
}

}  // namespace cast::ad
