#include "clmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "clmae/errors.hpp"

namespace clmae {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

RowGroups uniform_groups(std::size_t groups, std::size_t count) {
  RowGroups out(groups);
  for (std::size_t g = 0; g < groups; ++g) out[g] = {g * count, count};
  return out;
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() noexcept : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

template <typename T>
std::span<T> Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

}  // namespace detail

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> values(shape_numel(shape), value);
  return from_vector(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_vector({}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const Shape& s = node_->shape;
  if (s.size() < 2) return 1;
  return node_->data.size() / s.back();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const Shape& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  node_->requires_grad = value;
  if (!value) node_->grad.clear();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_vector(node_->shape, node_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  using NodeT = detail::Node<T>;
  if (numel() != 1) {
    throw DomainError("backward() needs a scalar root, got shape " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (NodeT* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
  for (NodeT* n : order) {
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- helpers --------------------------------------------------------------

namespace {

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(NodeT<T>&)> backward_fn) {
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor<T>* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor<T>* t : inputs) node->parents.push_back(t->node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(NodeT<T>&)> backward_fn) {
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor<T>& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor<T>& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMut = Eigen::Map<RowMajor<T>>;
template <typename T>
using MapConst = Eigen::Map<const RowMajor<T>>;

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  MapConst<T> A(a, m, k), B(b, k, n);
  MapMut<T> C(c, m, n);
  if (accumulate) C.noalias() += A * B;
  else C.noalias() = A * B;
}

// c[m x k] += d[m x n] * b[k x n]^T
template <typename T>
void gemm_nt_acc(const T* d, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  MapConst<T> D(d, m, n), B(b, k, n);
  MapMut<T> C(c, m, k);
  C.noalias() += D * B.transpose();
}

// c[k x n] += a[m x k]^T * d[m x n]
template <typename T>
void gemm_tn_acc(const T* a, const T* d, T* c, std::size_t m, std::size_t k, std::size_t n) {
  MapConst<T> A(a, m, k), D(d, m, n);
  MapMut<T> C(c, k, n);
  C.noalias() += A.transpose() * D;
}

template <typename T>
std::vector<T> transposed(std::span<const T> src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(src.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

enum class Broadcast { same, left_scalar, right_scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return Broadcast::same;
  if (a.numel() == 1) return Broadcast::left_scalar;
  if (b.numel() == 1) return Broadcast::right_scalar;
  throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()) + " are not broadcast-compatible");
}

// Shared driver for binary elementwise ops. fwd(x, y) -> value;
// dfx / dfy (x, y, out) -> partial derivative.
template <typename T, typename Fwd, typename Dx, typename Dy>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Dx dfx,
                    Dy dfy) {
  const Broadcast kind = broadcast_kind(a, b, name);
  const Shape shape = kind == Broadcast::left_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const bool sa = kind == Broadcast::left_scalar;
  const bool sb = kind == Broadcast::right_scalar;
  std::vector<T> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[sa ? 0 : i], bd[sb ? 0 : i]);
  return make_result<T>(shape, std::move(out), {&a, &b}, [sa, sb, n, dfx, dfy](NodeT<T>& self) {
    NodeT<T>& pa = *self.parents[0];
    NodeT<T>& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        ga[sa ? 0 : i] += g[i] * dfx(pa.data[sa ? 0 : i], pb.data[sb ? 0 : i], self.data[i]);
      }
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        gb[sb ? 0 : i] += g[i] * dfy(pa.data[sa ? 0 : i], pb.data[sb ? 0 : i], self.data[i]);
      }
    }
  });
}

// Shared driver for unary elementwise ops; d(x, y) -> dy/dx.
template <typename T, typename Fwd, typename D>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, Fwd fwd, D dfx) {
  require_defined(a, name);
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, [n, dfx](NodeT<T>& self) {
    NodeT<T>& p = *self.parents[0];
    auto gp = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[i] * dfx(p.data[i], self.data[i]);
  });
}

}  // namespace

// ---- matmul ---------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [m, k, n](NodeT<T>& self) {
    NodeT<T>& pa = *self.parents[0];
    NodeT<T>& pb = *self.parents[1];
    if (pa.requires_grad) {
      // dA = dC * B^T
      gemm_nt_acc(self.grad.data(), pb.data.data(), pa.grad_buffer().data(), m, k, n);
    }
    if (pb.requires_grad) {
      // dB = A^T * dC
      gemm_tn_acc(pa.data.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
    }
  });
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      a, "mul_scalar", [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a, LogMode mode) {
  require_defined(a, "log");
  const T eps = static_cast<T>(kLogClampEps);
  if (mode == LogMode::strict) {
    for (T x : a.data()) {
      if (!(x > T(0))) {
        throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(x)) +
                          " in strict mode");
      }
    }
  }
  return unary_op(
      a, "log", [eps](T x) { return std::log(std::max(x, eps)); },
      [eps](T x, T) { return x > eps ? T(1) / x : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return unary_op(
      a, "clamp_min", [floor](T x) { return std::max(x, floor); },
      [floor](T x, T) { return x > floor ? T(1) : T(0); });
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias) {
  require_defined(a, "add_rowwise");
  require_defined(bias, "add_rowwise");
  const std::size_t r = a.rows(), c = a.cols();
  if (bias.numel() != c) {
    throw ShapeError("add_rowwise: bias " + shape_string(bias.shape()) + " vs input " +
                     shape_string(a.shape()));
  }
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = ad[i * c + j] + bd[j];
  return make_result<T>(a.shape(), std::move(out), {&a, &bias}, [r, c](NodeT<T>& self) {
    NodeT<T>& pa = *self.parents[0];
    NodeT<T>& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer();
      for (std::size_t i = 0; i < r * c; ++i) ga[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& s) {
  require_defined(a, "scale_rows");
  require_defined(s, "scale_rows");
  const std::size_t r = a.rows(), c = a.cols();
  if (s.numel() != r) {
    throw ShapeError("scale_rows: scale " + shape_string(s.shape()) + " vs input " +
                     shape_string(a.shape()));
  }
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto sd = s.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = ad[i * c + j] * sd[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &s}, [r, c](NodeT<T>& self) {
    NodeT<T>& pa = *self.parents[0];
    NodeT<T>& ps = *self.parents[1];
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[i * c + j] * ps.data[i];
    }
    if (ps.requires_grad) {
      auto gs = ps.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * pa.data[i * c + j];
        gs[i] += acc;
      }
    }
  });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require_defined(a, "sum");
  T acc = 0;
  for (T x : a.data()) acc += x;
  const std::size_t n = a.numel();
  return make_result<T>({}, {acc}, {&a}, [n](NodeT<T>& self) {
    auto gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
  require_defined(a, "sum");
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T(0));
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += ad[(o * len + l) * inner + i];
  return make_result<T>(std::move(out_shape), std::move(out), {&a},
                        [outer, len, inner](NodeT<T>& self) {
                          auto gp = self.parents[0]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t l = 0; l < len; ++l)
                              for (std::size_t i = 0; i < inner; ++i)
                                gp[(o * len + l) * inner + i] += self.grad[o * inner + i];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require_defined(a, "mean");
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  Tensor<T> s = sum(a, axis);
  return mul_scalar(s, T(1) / static_cast<T>(a.shape()[axis]));
}

// ---- activations ----------------------------------------------------------

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary_op(
      a, "gelu", [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  require_defined(a, "softmax");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = ad.data() + i * c;
    T* y = out.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= total;
  }
  return make_result<T>(a.shape(), std::move(out), {&a}, [r, c](NodeT<T>& self) {
    auto gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const T* y = self.data.data() + i * c;
      const T* g = self.grad.data() + i * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_defined(a, "layernorm");
  const std::size_t r = a.rows(), c = a.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw ShapeError("layernorm: gain/bias " + shape_string(gain.shape()) + "/" +
                     shape_string(bias.shape()) + " vs input " + shape_string(a.shape()));
  }
  std::vector<T> xhat(a.numel()), rstd(r), out(a.numel());
  auto ad = a.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = ad.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += x[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<T>(c);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x[j] - mu) * rstd[i];
      out[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      a.shape(), std::move(out), {&a, &gain, &bias},
      [r, c, xhat = std::move(xhat), rstd = std::move(rstd)](NodeT<T>& self) {
        NodeT<T>& px = *self.parents[0];
        NodeT<T>& pg = *self.parents[1];
        NodeT<T>& pb = *self.parents[2];
        const auto& g = self.grad;
        if (pg.requires_grad) {
          auto gg = pg.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
        }
        if (pb.requires_grad) {
          auto gb = pb.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        if (px.requires_grad) {
          auto gx = px.grad_buffer();
          std::vector<T> dxhat(c);
          for (std::size_t i = 0; i < r; ++i) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = g[i * c + j] * pg.data[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[i * c + j];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
          }
        }
      });
}

// ---- shape ----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const std::size_t n = a.numel();
  return make_result<T>(std::move(shape), std::move(out), {&a}, [n](NodeT<T>& self) {
    auto gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  return make_result<T>({c, r}, transposed<T>(a.data(), r, c), {&a}, [r, c](NodeT<T>& self) {
    auto gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().defined() ? parts.front().cols() : 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts.front().shape()) +
                       " vs " + shape_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result<T>({total, c}, std::move(out), parts,
                        [offsets = std::move(offsets)](NodeT<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            NodeT<T>& p = *self.parents[k];
                            if (!p.requires_grad) continue;
                            auto gp = p.grad_buffer();
                            for (std::size_t i = 0; i < gp.size(); ++i)
                              gp[i] += self.grad[offsets[k] + i];
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows) {
  require_rank2(a, "slice_rows");
  if (rows.empty()) throw ShapeError("slice_rows: empty row selection");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(rows.size() * c);
  auto ad = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) {
      throw ShapeError("slice_rows: row " + std::to_string(rows[i]) + " out of range for shape " +
                       shape_string(a.shape()));
    }
    std::copy_n(ad.data() + rows[i] * c, c, out.data() + i * c);
  }
  return make_result<T>({rows.size(), c}, std::move(out), {&a}, [rows, c](NodeT<T>& self) {
    auto gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gp[rows[i] * c + j] += self.grad[i * c + j];
  });
}

// ---- attention ------------------------------------------------------------

namespace {

template <typename T>
void check_attention_inputs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const RowGroups& groups, std::size_t heads) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q/k/v shapes differ: " + shape_string(q.shape()) + ", " +
                     shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  if (heads == 0 || q.cols() % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  for (const RowGroup& g : groups) {
    if (g.count == 0 || g.offset + g.count > q.rows()) {
      throw ShapeError("attention: row group out of range for shape " + shape_string(q.shape()));
    }
  }
}

// probs (cnt x cnt) = softmax(scale * Q_h K_h^T) for one group/head.
template <typename T>
void group_head_probs(const T* q, const T* k, std::size_t width, std::size_t col0,
                      std::size_t dh, std::size_t cnt, T scale, T* probs) {
  for (std::size_t i = 0; i < cnt; ++i) {
    T* row = probs + i * cnt;
    const T* qi = q + i * width + col0;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cnt; ++j) {
      const T* kj = k + j * width + col0;
      T s = 0;
      for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
      row[j] = s * scale;
      mx = std::max(mx, row[j]);
    }
    T total = 0;
    for (std::size_t j = 0; j < cnt; ++j) total += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < cnt; ++j) row[j] /= total;
  }
}

}  // namespace

template <typename T>
std::vector<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, const RowGroup& group,
                               std::size_t heads, std::size_t head) {
  check_attention_inputs(q, k, k, {group}, heads);
  const std::size_t width = q.cols(), dh = width / heads;
  std::vector<T> probs(group.count * group.count);
  group_head_probs(q.data().data() + group.offset * width, k.data().data() + group.offset * width,
                   width, head * dh, dh, group.count, T(1) / std::sqrt(static_cast<T>(dh)),
                   probs.data());
  return probs;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const RowGroups& groups, std::size_t heads) {
  check_attention_inputs(q, k, v, groups, heads);
  const std::size_t width = q.cols(), dh = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<std::size_t> prob_offset(groups.size() * heads);
  std::size_t total = 0;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t h = 0; h < heads; ++h) {
      prob_offset[g * heads + h] = total;
      total += groups[g].count * groups[g].count;
    }
  std::vector<T> probs(total);
  std::vector<T> out(q.numel(), T(0));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const std::size_t cnt = groups[g].count, base = groups[g].offset * width;
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + prob_offset[g * heads + h];
      group_head_probs(qd + base, kd + base, width, h * dh, dh, cnt, scale, p);
      for (std::size_t i = 0; i < cnt; ++i) {
        T* oi = out.data() + base + i * width + h * dh;
        for (std::size_t j = 0; j < cnt; ++j) {
          const T a = p[i * cnt + j];
          const T* vj = vd + base + j * width + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += a * vj[e];
        }
      }
    }
  }
  return make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [groups, heads, width, dh, scale, probs = std::move(probs),
       prob_offset = std::move(prob_offset)](NodeT<T>& self) {
        NodeT<T>& pq = *self.parents[0];
        NodeT<T>& pk = *self.parents[1];
        NodeT<T>& pv = *self.parents[2];
        const T* gd = self.grad.data();
        T* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        T* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        T* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        std::vector<T> ds;
        for (std::size_t g = 0; g < groups.size(); ++g) {
          const std::size_t cnt = groups[g].count, base = groups[g].offset * width;
          ds.resize(cnt * cnt);
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + prob_offset[g * heads + h];
            const std::size_t col0 = h * dh;
            if (gv) {
              // dV_j += sum_i P_ij dO_i
              for (std::size_t i = 0; i < cnt; ++i) {
                const T* go = gd + base + i * width + col0;
                for (std::size_t j = 0; j < cnt; ++j) {
                  const T a = p[i * cnt + j];
                  T* gvj = gv + base + j * width + col0;
                  for (std::size_t e = 0; e < dh; ++e) gvj[e] += a * go[e];
                }
              }
            }
            if (!gq && !gk) continue;
            // dP_ij = dO_i . V_j ; dS = P * (dP - rowsum(dP * P))
            for (std::size_t i = 0; i < cnt; ++i) {
              const T* go = gd + base + i * width + col0;
              T dot = 0;
              for (std::size_t j = 0; j < cnt; ++j) {
                const T* vj = pv.data.data() + base + j * width + col0;
                T s = 0;
                for (std::size_t e = 0; e < dh; ++e) s += go[e] * vj[e];
                ds[i * cnt + j] = s;
                dot += s * p[i * cnt + j];
              }
              for (std::size_t j = 0; j < cnt; ++j)
                ds[i * cnt + j] = p[i * cnt + j] * (ds[i * cnt + j] - dot) * scale;
            }
            for (std::size_t i = 0; i < cnt; ++i) {
              const T* qi = pq.data.data() + base + i * width + col0;
              T* gqi = gq ? gq + base + i * width + col0 : nullptr;
              for (std::size_t j = 0; j < cnt; ++j) {
                const T s = ds[i * cnt + j];
                const T* kj = pk.data.data() + base + j * width + col0;
                if (gqi)
                  for (std::size_t e = 0; e < dh; ++e) gqi[e] += s * kj[e];
                if (gk) {
                  T* gkj = gk + base + j * width + col0;
                  for (std::size_t e = 0; e < dh; ++e) gkj[e] += s * qi[e];
                }
              }
            }
          }
        }
      });
}

// ---- verification ---------------------------------------------------------

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                  double eps) {
  x.set_requires_grad(true);
  return grad_check([&] { return f(x); }, {x}, GradCheckOptions{eps, 0, 0});
}

double grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves,
                  const GradCheckOptions& options) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Tensor<double> y = f();
    y.backward();
  }
  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (auto& leaf : leaves) {
    const std::size_t n = leaf.numel();
    std::vector<double> analytic(n, 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_leaf != 0 && n > options.max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_leaf);
      std::sort(coords.begin(), coords.end());
    }
    auto values = leaf.mutable_data();
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double up = f().item();
      values[i] = saved - options.eps;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

// ---- instantiations -------------------------------------------------------

#define CLMAE_INSTANTIATE_TENSOR(T)                                                          \
  template struct detail::Node<T>;                                                           \
  template class Tensor<T>;                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> neg(const Tensor<T>&);                                                  \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&, LogMode);                                         \
  template Tensor<T> square(const Tensor<T>&);                                               \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                         \
  template Tensor<T> add_rowwise(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> scale_rows(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> softmax(const Tensor<T>&);                                              \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> transpose(const Tensor<T>&);                                            \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                             \
  template Tensor<T> slice_rows(const Tensor<T>&, const std::vector<std::size_t>&);          \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                               const RowGroups&, std::size_t);                               \
  template std::vector<T> attention_probs(const Tensor<T>&, const Tensor<T>&, const RowGroup&, \
                                          std::size_t, std::size_t);

CLMAE_INSTANTIATE_TENSOR(float)
CLMAE_INSTANTIATE_TENSOR(double)

}  // namespace clmae
