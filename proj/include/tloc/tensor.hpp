#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tloc::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

/// Dense row-major float64 tensor with reverse-mode gradients. Copies share the
/// same underlying node, like a handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access, for parameters and test fixtures. Writing into a
  /// tensor that already feeds a recorded graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  /// Gradient buffer; all zeros until backward reaches this tensor.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Accumulates d(loss)/d(t) into every tensor that requires grad and is
/// reachable from `loss`. Each node is visited once, in reverse topological
/// order. Throws std::invalid_argument when `loss` is not a scalar.
void backward(const Tensor& loss);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[m×k]·w[k×n] + bias[n].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor transpose(const Tensor& x);

// Elementwise and broadcasting. `b` may have the shape of any suffix of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor shift(const Tensor& x, double s);
/// Row i of x[m×n] multiplied by s[i]; s has m elements (shape [m] or [m×1]).
Tensor row_scale(const Tensor& x, const Tensor& s);
Tensor gelu(const Tensor& x);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Rows `rows` of a 2-D tensor, in the given order.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Copy of x with x[rows[k]] replaced by replacement[k]. Other rows pass through
/// bit for bit.
Tensor replace_rows(const Tensor& x, std::span<const std::size_t> rows, const Tensor& replacement);
/// table[ids[k]] stacked into [ids.size() × C].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// Normalization and probabilities.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis with population variance; eps inside the
/// square root.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
/// Mean over the batch of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

/// Scaled dot-product multi-head self-attention over `batch` sequences.
/// qkv is [batch·T × 3C] holding [q | k | v] per token; the result is
/// [batch·T × C] with head outputs concatenated. When `probs_out` is non-null
/// it receives the attention probabilities laid out [batch][head][T][T].
Tensor self_attention(const Tensor& qkv, std::size_t batch, std::size_t heads,
                      std::vector<double>* probs_out = nullptr);

}  // namespace tloc::ad
