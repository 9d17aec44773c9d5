#include "tloc/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "gemm.hpp"

namespace tloc::ad {

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

void check_finite([[maybe_unused]] const std::vector<double>& v, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (double x : v) {
    if (!std::isfinite(x)) fail(std::string("non-finite value produced by ") + op);
  }
#endif
}

using BackwardFn = std::function<void(Node&)>;

// Builds the output node; parents and the backward closure are only kept when
// some input requires grad and recording is on.
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   BackwardFn fn, const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs, BackwardFn fn,
                     const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

Node& parent(Node& self, std::size_t k) { return *self.parents[k]; }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.rank() != rank) {
    fail(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) fail("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "×" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) fail("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (values.size() != shape_numel(shape)) {
    fail("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->ensure_grad();
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) fail("axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) fail("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) fail("index rank mismatch");
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= node_->shape[k]) fail("index out of range");
    flat = flat * node_->shape[k] + i;
    ++k;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::grad() const { return node_->ensure_grad(); }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  auto& g = node_->ensure_grad();
  std::fill(g.begin(), g.end(), 0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) fail("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (!n.backward) continue;
    n.ensure_grad();
    n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail("matmul: inner dimensions differ: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm_nn(m, n, k, a.data().data(), k, b.data().data(), n, out.data(), n, false);
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, n, k](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
          kernels::gemm_nt(m, k, n, self.grad.data(), n, pb.value.data(), n, pa.ensure_grad().data(), k, true);
        }
        if (pb.requires_grad) {
          kernels::gemm_tn(k, n, m, pa.value.data(), k, self.grad.data(), n, pb.ensure_grad().data(), n, true);
        }
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) fail("linear: shapes differ: " + shape_str(x.shape()) + " · " + shape_str(w.shape()));
  if (bias.numel() != n) fail("linear: bias of shape " + shape_str(bias.shape()) + " for width " + std::to_string(n));
  std::vector<double> out(m * n);
  const auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  kernels::gemm_nn(m, n, k, x.data().data(), k, w.data().data(), n, out.data(), n, true);
  return make_result(
      {m, n}, std::move(out), {x, w, bias},
      [m, n, k](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        Node& pb = parent(self, 2);
        if (px.requires_grad) {
          kernels::gemm_nt(m, k, n, self.grad.data(), n, pw.value.data(), n, px.ensure_grad().data(), k, true);
        }
        if (pw.requires_grad) {
          kernels::gemm_tn(k, n, m, px.value.data(), k, self.grad.data(), n, pw.ensure_grad().data(), n, true);
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
          }
        }
      },
      "linear");
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  const auto v = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  }
  return make_result(
      {n, m}, std::move(out), {x},
      [m, n](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
        }
      },
      "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (!is_suffix(b.shape(), a.shape())) {
    fail("add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel(), nb = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] += bv[i % nb];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [n, nb](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
          auto& g = pa.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i % nb] += self.grad[i];
        }
      },
      "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) fail("mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [n](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
          auto& g = pa.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pa.value[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& x, double s) {
  require_defined(x, "scale");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= s;
  return make_result(
      x.shape(), std::move(out), {x},
      [s](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
      },
      "scale");
}

Tensor shift(const Tensor& x, double s) {
  require_defined(x, "shift");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v += s;
  return make_result(
      x.shape(), std::move(out), {x},
      [](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "shift");
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "row_scale");
  require_defined(s, "row_scale");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (s.numel() != m) fail("row_scale: " + std::to_string(s.numel()) + " scales for " + std::to_string(m) + " rows");
  std::vector<double> out(m * n);
  const auto xv = x.data();
  const auto sv = s.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * sv[i];
  }
  return make_result(
      x.shape(), std::move(out), {x, s},
      [m, n](Node& self) {
        Node& px = parent(self, 0);
        Node& ps = parent(self, 1);
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * ps.value[i];
          }
        }
        if (ps.requires_grad) {
          auto& g = ps.ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += self.grad[i * n + j] * px.value[i * n + j];
            g[i] += acc;
          }
        }
      },
      "row_scale");
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
  return make_result(
      x.shape(), std::move(out), {x},
      [n](Node& self) {
        Node& px = parent(self, 0);
        auto& g = px.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double v = px.value[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          g[i] += self.grad[i] * (cdf + v * pdf);
        }
      },
      "gelu");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result(
      {1}, {acc}, {x},
      [](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (double& v : g) v += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    fail("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) + " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(
      std::move(shape), std::move(out), {x},
      [](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) fail("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) fail("concat: rank mismatch");
    total += s[axis];
    s[axis] = shape[axis];
    if (s != shape) fail("concat: incompatible shapes " + shape_str(shape) + " and " + shape_str(p.shape()));
  }
  shape[axis] = total;
  const AxisSplit out_split = split_axis(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisSplit s = split_axis(p.shape(), axis);
    const auto v = p.data();
    const std::size_t block = s.len * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_split.len * out_split.inner + offset * s.inner));
    }
    offset += s.len;
  }
  return make_result_n(
      shape, std::move(out), parts,
      [offsets, out_split, axis](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          Node& p = *self.parents[k];
          if (!p.requires_grad) continue;
          auto& g = p.ensure_grad();
          const std::size_t len = p.shape[axis];
          const std::size_t block = len * out_split.inner;
          for (std::size_t o = 0; o < out_split.outer; ++o) {
            const std::size_t src = o * out_split.len * out_split.inner + offsets[k] * out_split.inner;
            for (std::size_t i = 0; i < block; ++i) g[o * block + i] += self.grad[src + i];
          }
        }
      },
      "concat");
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  const AxisSplit s = split_axis(x.shape(), axis);
  if (length == 0 || start + length > s.len) {
    fail("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of bounds for " +
         shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  const std::size_t block = length * s.inner;
  std::vector<double> out(s.outer * block);
  const auto v = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * s.len * s.inner + start * s.inner), block,
                out.begin() + static_cast<std::ptrdiff_t>(o * block));
  }
  return make_result(
      std::move(shape), std::move(out), {x},
      [s, start, block](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          const std::size_t dst = o * s.len * s.inner + start * s.inner;
          for (std::size_t i = 0; i < block; ++i) g[dst + i] += self.grad[o * block + i];
        }
      },
      "slice");
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "select_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (rows.empty()) fail("select_rows: no rows");
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * n);
  const auto v = x.data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= m) fail("select_rows: row " + std::to_string(idx[k]) + " out of range");
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(idx[k] * n), n, out.begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return make_result(
      {idx.size(), n}, std::move(out), {x},
      [idx, n](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k) {
          for (std::size_t j = 0; j < n; ++j) g[idx[k] * n + j] += self.grad[k * n + j];
        }
      },
      "select_rows");
}

Tensor replace_rows(const Tensor& x, std::span<const std::size_t> rows, const Tensor& replacement) {
  require_rank(x, 2, "replace_rows");
  require_rank(replacement, 2, "replace_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (replacement.dim(1) != n || replacement.dim(0) != rows.size()) {
    fail("replace_rows: replacement " + shape_str(replacement.shape()) + " does not fit " +
         std::to_string(rows.size()) + " rows of width " + std::to_string(n));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<char> replaced(m, 0);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto rv = replacement.data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= m) fail("replace_rows: row " + std::to_string(idx[k]) + " out of range");
    if (replaced[idx[k]]) fail("replace_rows: duplicate row");
    replaced[idx[k]] = 1;
    std::copy_n(rv.begin() + static_cast<std::ptrdiff_t>(k * n), n, out.begin() + static_cast<std::ptrdiff_t>(idx[k] * n));
  }
  return make_result(
      x.shape(), std::move(out), {x, replacement},
      [idx, replaced, m, n](Node& self) {
        Node& px = parent(self, 0);
        Node& pr = parent(self, 1);
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            if (replaced[i]) continue;
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j];
          }
        }
        if (pr.requires_grad) {
          auto& g = pr.ensure_grad();
          for (std::size_t k = 0; k < idx.size(); ++k) {
            for (std::size_t j = 0; j < n; ++j) g[k * n + j] += self.grad[idx[k] * n + j];
          }
        }
      },
      "replace_rows");
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), n = table.dim(1);
  if (ids.empty()) fail("embedding: no ids");
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * n);
  const auto tv = table.data();
  for (std::size_t k = 0; k < idv.size(); ++k) {
    if (idv[k] < 0 || static_cast<std::size_t>(idv[k]) >= vocab) {
      fail("embedding: id " + std::to_string(idv[k]) + " out of range for table of " + std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idv[k]) * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return make_result(
      {idv.size(), n}, std::move(out), {table},
      [idv, n](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t k = 0; k < idv.size(); ++k) {
          const std::size_t row = static_cast<std::size_t>(idv[k]);
          for (std::size_t j = 0; j < n; ++j) g[row * n + j] += self.grad[k * n + j];
        }
      },
      "embedding");
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = v[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, v[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(v[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= z;
    }
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [s](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double dot = 0.0;
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t i = base + k * s.inner;
              dot += self.grad[i] * self.value[i];
            }
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t i = base + k * s.inner;
              g[i] += self.value[i] * (self.grad[i] - dot);
            }
          }
        }
      },
      "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t n = x.shape().back();
  if (n < 2) fail("layer_norm: normalized axis must have length >= 2");
  if (gain.numel() != n || bias.numel() != n) fail("layer_norm: gain/bias width mismatch");
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  // Saved per row: normalized values and 1/std.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto v = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, n, xhat, inv_std](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        if (pg.requires_grad) {
          auto& g = pg.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j] * (*xhat)[r * n + j];
          }
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
          }
        }
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dh = 0.0;
            double sum_dh_h = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = self.grad[r * n + j] * pg.value[j];
              sum_dh += dh;
              sum_dh_h += dh * (*xhat)[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = self.grad[r * n + j] * pg.value[j];
              g[r * n + j] += (*inv_std)[r] * (dh - inv_n * sum_dh - (*xhat)[r * n + j] * inv_n * sum_dh_h);
            }
          }
        }
      },
      "layer_norm");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b) fail("cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " + std::to_string(b));
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      fail("cross_entropy: target " + std::to_string(t) + " out of range [0, " + std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(b * k);
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  const auto v = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = v.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx - log_z);
    total += log_z - (row[static_cast<std::size_t>(tv[i])] - mx);
  }
  return make_result(
      {1}, {total / static_cast<double>(b)}, {logits},
      [b, k, probs, tv](Node& self) {
        auto& g = parent(self, 0).ensure_grad();
        const double coef = self.grad[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = (static_cast<std::int32_t>(j) == tv[i]) ? 1.0 : 0.0;
            g[i * k + j] += coef * ((*probs)[i * k + j] - onehot);
          }
        }
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------
// Attention

Tensor self_attention(const Tensor& qkv, std::size_t batch, std::size_t heads, std::vector<double>* probs_out) {
  require_rank(qkv, 2, "self_attention");
  if (batch == 0 || heads == 0) fail("self_attention: batch and heads must be positive");
  const std::size_t rows = qkv.dim(0), width = qkv.dim(1);
  if (rows % batch != 0) fail("self_attention: rows not divisible by batch");
  if (width % 3 != 0 || (width / 3) % heads != 0) fail("self_attention: width must be 3·C with C divisible by heads");
  const std::size_t t = rows / batch, c = width / 3, dh = c / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<double>>(batch * heads * t * t);
  std::vector<double> out(rows * c);
  const double* in = qkv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = in + b * t * width;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * t * t;
      kernels::gemm_nt(t, t, dh, base + h * dh, width, base + c + h * dh, width, p, t, false);
      for (std::size_t i = 0; i < t; ++i) {
        double* row = p + i * t;
        double mx = row[0] * scl;
        for (std::size_t j = 0; j < t; ++j) {
          row[j] *= scl;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < t; ++j) row[j] /= z;
      }
      kernels::gemm_nn(t, dh, t, p, t, base + 2 * c + h * dh, width, out.data() + b * t * c + h * dh, c, false);
    }
  }
  if (probs_out) *probs_out = *probs;
  return make_result(
      {rows, c}, std::move(out), {qkv},
      [batch, heads, t, c, dh, width, scl, probs](Node& self) {
        Node& px = parent(self, 0);
        auto& g = px.ensure_grad();
        const double* in = px.value.data();
        std::vector<double> dp(t * t);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* base = in + b * t * width;
          double* gbase = g.data() + b * t * width;
          const double* dout = self.grad.data() + b * t * c;
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + (b * heads + h) * t * t;
            const double* dout_h = dout + h * dh;
            // dV = Pᵀ·dO
            kernels::gemm_tn(t, dh, t, p, t, dout_h, c, gbase + 2 * c + h * dh, width, true);
            // dP = dO·Vᵀ, then through the softmax.
            kernels::gemm_nt(t, t, dh, dout_h, c, base + 2 * c + h * dh, width, dp.data(), t, false);
            for (std::size_t i = 0; i < t; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < t; ++j) dot += dp[i * t + j] * p[i * t + j];
              for (std::size_t j = 0; j < t; ++j) dp[i * t + j] = p[i * t + j] * (dp[i * t + j] - dot) * scl;
            }
            // dQ = dS·K, dK = dSᵀ·Q
            kernels::gemm_nn(t, dh, t, dp.data(), t, base + c + h * dh, width, gbase + h * dh, width, true);
            kernels::gemm_tn(t, dh, t, dp.data(), t, base + h * dh, width, gbase + c + h * dh, width, true);
          }
        }
      },
      "self_attention");
}

}  // namespace tloc::ad
