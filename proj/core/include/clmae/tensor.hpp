#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap shared handle onto a graph node. Every operation applied
// while gradient recording is enabled (see NoGradGuard) and with at least one
// input requiring a gradient creates a node remembering its inputs and a
// backward closure. backward() on a scalar walks the graph in reverse
// topological order and sums gradients into every reachable leaf that
// requires them. Graphs are confined to the thread that built them.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace clmae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Behaviour of log() on non-positive inputs.
enum class LogMode {
  strict,   ///< throw DomainError
  clamped,  ///< clamp the argument to kLogClampEps
};
inline constexpr double kLogClampEps = 1e-12;

/// Contiguous run of rows forming one independent sequence (one image).
struct RowGroup {
  std::size_t offset = 0;
  std::size_t count = 0;
};
using RowGroups = std::vector<RowGroup>;

/// `groups` consecutive groups of `count` rows each.
RowGroups uniform_groups(std::size_t groups, std::size_t count);

bool grad_enabled() noexcept;

/// Disables graph recording for its lifetime (per thread).
class NoGradGuard {
 public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // empty for leaves

  bool is_leaf() const noexcept { return !backward_fn; }
  /// Gradient buffer, allocated (zero-filled) on first use.
  std::span<T> grad_buffer();
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Product of all leading extents; 1 for a scalar.
  std::size_t rows() const;
  /// Last extent; 1 for a scalar.
  std::size_t cols() const;

  std::span<const T> data() const { return node_->data; }
  /// Writable view. Only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  /// Leaves only; toggling on an interior node has no defined meaning.
  void set_requires_grad(bool value);
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; empty span if nothing was accumulated yet.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  /// New leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  /// Converts between precisions; the result is a fresh leaf.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>::from_vector(node_->shape, std::move(out));
  }

  /// Reverse-mode pass from this scalar. Leaf gradients accumulate.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// ---- linear algebra -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// ---- elementwise ----------------------------------------------------------
// Binary ops accept equal shapes or a single-element operand on either side.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> neg(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a, LogMode mode = LogMode::strict);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
/// max(a, floor); gradient passes only where a > floor.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor);

/// a[r, :] + bias for every row r; bias has cols(a) entries.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias);
/// a[r, :] * s[r]; s has rows(a) entries.
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& s);

// ---- reductions -----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis);

// ---- activations ----------------------------------------------------------

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a);

/// Per-row normalisation over the last axis with population variance, then
/// gain * x_hat + bias.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps = T(1e-6));

// ---- shape ----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// Rank-2 transpose (materialised).
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);
/// Stacks rank-2 tensors with equal column counts.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
/// Gathers the listed rows (repeats allowed). Backward scatter-adds.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows);

// ---- attention ------------------------------------------------------------

/// Multi-head scaled dot-product attention over independent row groups.
/// q, k, v are R x D; within each group, head h uses columns
/// [h*D/heads, (h+1)*D/heads) and attends only to rows of its own group.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const RowGroups& groups, std::size_t heads);

/// Attention probabilities for one group and head (count x count, row-major).
template <typename T>
std::vector<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, const RowGroup& group,
                               std::size_t heads, std::size_t head);

// ---- verification ---------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  /// Checks at most this many coordinates per leaf (0 = all), chosen
  /// deterministically from `seed`.
  std::size_t max_coords_per_leaf = 0;
  unsigned long long seed = 0;
};

/// Maximum over checked coordinates of
/// |analytic - central difference| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double eps = 1e-5);

/// Same measure over several leaves of a closure that rebuilds its graph on
/// every call (typically parameters captured by reference).
double grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves,
                  const GradCheckOptions& options = {});

}  // namespace clmae
