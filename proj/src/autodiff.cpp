#include "vmed/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace vmed::ad {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  double* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

using detail::Node;

namespace {

thread_local Tape* g_active_tape = nullptr;

[[noreturn]] void shape_fail(const char* op, const std::string& detail_text) {
  throw ShapeError(std::string(op) + ": " + detail_text);
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  shape_fail(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(value));
  Tape* tape = g_active_tape;
  bool needs_grad = false;
  if (tape != nullptr) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(inputs.size());
    for (const Tensor& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward_fn);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(value));
  Tape* tape = g_active_tape;
  bool needs_grad = false;
  if (tape != nullptr) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->leaf = false;
    for (const Tensor& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward_fn);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) shape_fail(op, "undefined tensor");
}

enum class Broadcast { kSame, kScalarA, kScalarB, kRowB };

Broadcast classify(const char* op, const Tensor& a, const Tensor& b, bool allow_row) {
  require_defined(op, a);
  require_defined(op, b);
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalarB;
  if (a.size() == 1) return Broadcast::kScalarA;
  if (allow_row && a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) return Broadcast::kRowB;
  shape_fail(op, a.shape(), b.shape());
}

struct BroadcastIndex {
  Broadcast mode;
  std::size_t row = 1;
  std::size_t a(std::size_t i) const { return mode == Broadcast::kScalarA ? 0 : i; }
  std::size_t b(std::size_t i) const {
    switch (mode) {
      case Broadcast::kScalarB: return 0;
      case Broadcast::kRowB: return i % row;
      default: return i;
    }
  }
};

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, bool allow_row, F f, DA da, DB db) {
  const Broadcast mode = classify(op, a, b, allow_row);
  const Shape out_shape = mode == Broadcast::kScalarA ? b.shape() : a.shape();
  const BroadcastIndex idx{mode, mode == Broadcast::kRowB ? b.dim(0) : 1};
  const std::size_t n = numel(out_shape);
  std::vector<double> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[idx.a(i)], bv[idx.b(i)]);
  return make_result(out_shape, std::move(out), {a, b}, [idx, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    double* ga = pa.grad_buffer();
    double* gb = pb.grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const double x = pa.value[idx.a(i)];
      const double y = pb.value[idx.b(i)];
      const double g = self.grad[i];
      if (ga != nullptr) ga[idx.a(i)] += g * da(x, y, self.value[i]);
      if (gb != nullptr) gb[idx.b(i)] += g * db(x, y, self.value[i]);
    }
  });
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  require_defined(op, a);
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& pa = *self.parents[0];
    double* ga = pa.grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      ga[i] += self.grad[i] * df(pa.value[i], self.value[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Iteration plan for softmax / axis reductions on rank-1 and rank-2 tensors.
struct AxisPlan {
  std::size_t groups;
  std::size_t length;
  std::size_t stride;
  std::size_t group_stride;
};

AxisPlan axis_plan(const char* op, const Tensor& a, std::size_t axis) {
  if (a.rank() == 1 && axis == 0) return {1, a.dim(0), 1, 0};
  if (a.rank() == 2 && axis == 1) return {a.dim(0), a.dim(1), 1, a.dim(1)};
  if (a.rank() == 2 && axis == 0) return {a.dim(1), a.dim(0), a.dim(1), 1};
  shape_fail(op, "axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
}

}  // namespace

// ---- shapes / tensor -------------------------------------------------------

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (shape.empty()) throw ShapeError("tensor: shape must have rank >= 1");
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  return Tensor(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return constant({n}, std::move(values));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim: axis out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw std::logic_error("mutable_data: only leaf tensors can be modified");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

std::vector<double> Tensor::to_vector() const { return node_->value; }

bool Tensor::requires_grad() const { return node_ != nullptr && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_->leaf; }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->value); }

// ---- tape ------------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  require_defined("backward", loss);
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (auto& node : nodes_) {
    if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw std::logic_error("backward: no active tape");
  g_active_tape->backward(loss);
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, true, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, false, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, false, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, false, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor shift(const Tensor& a, double offset) {
  return unary(
      "shift", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

// ---- linear algebra / structure -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2) || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = av.data() + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = arow[p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  Shape shape = b.rank() == 2 ? Shape{m, n} : Shape{m};
  return make_result(std::move(shape), std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    double* ga = pa.grad_buffer();
    double* gb = pb.grad_buffer();
    const double* g = self.grad.data();
    if (ga != nullptr) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = pb.value.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (gb != nullptr) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa.value.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double x = arow[p];
          double* gbrow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += x * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_defined("transpose", a);
  if (a.rank() != 2) shape_fail("transpose", "expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  auto av = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  return make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
    double* ga = self.parents[0]->grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined("reshape", a);
  if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  return make_result(std::move(shape), a.to_vector(), {a}, [](Node& self) {
    double* ga = self.parents[0]->grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    require_defined("concat", p);
    if (p.rank() != 1) shape_fail("concat", "expected rank-1 inputs, got " + shape_str(p.shape()));
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const std::size_t n = out.size();
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({n}, std::move(out), inputs, [offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      double* g = self.parents[k]->grad_buffer();
      if (g == nullptr) continue;
      const std::size_t len = self.parents[k]->value.size();
      for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offsets[k] + i];
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice(const Tensor& a, std::size_t start, std::size_t length) {
  require_defined("slice", a);
  if (a.rank() != 1 || length == 0 || start + length > a.dim(0)) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") invalid for shape " + shape_str(a.shape()));
  }
  auto av = a.data();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(start),
                          av.begin() + static_cast<std::ptrdiff_t>(start + length));
  return make_result({length}, std::move(out), {a}, [start](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    if (g == nullptr) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) g[start + i] += self.grad[i];
  });
}

// ---- reductions ------------------------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_defined("softmax", a);
  const AxisPlan plan = axis_plan("softmax", a, axis);
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t g = 0; g < plan.groups; ++g) {
    const std::size_t base = g * plan.group_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < plan.length; ++i) mx = std::max(mx, av[base + i * plan.stride]);
    double total = 0.0;
    for (std::size_t i = 0; i < plan.length; ++i) {
      const std::size_t at = base + i * plan.stride;
      out[at] = std::exp(av[at] - mx);
      total += out[at];
    }
    for (std::size_t i = 0; i < plan.length; ++i) out[base + i * plan.stride] /= total;
  }
  return make_result(a.shape(), std::move(out), {a}, [plan](Node& self) {
    double* ga = self.parents[0]->grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t g = 0; g < plan.groups; ++g) {
      const std::size_t base = g * plan.group_stride;
      double dot = 0.0;
      for (std::size_t i = 0; i < plan.length; ++i) {
        const std::size_t at = base + i * plan.stride;
        dot += self.grad[at] * self.value[at];
      }
      for (std::size_t i = 0; i < plan.length; ++i) {
        const std::size_t at = base + i * plan.stride;
        ga[at] += self.value[at] * (self.grad[at] - dot);
      }
    }
  });
}

Tensor logsumexp(const Tensor& a) {
  require_defined("logsumexp", a);
  auto av = a.data();
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : av) mx = std::max(mx, x);
  double total = 0.0;
  if (std::isfinite(mx)) {
    for (double x : av) total += std::exp(x - mx);
  }
  const double out = std::isfinite(mx) ? mx + std::log(total) : mx;
  return make_result({1}, {out}, {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    double* ga = pa.grad_buffer();
    if (ga == nullptr || !std::isfinite(self.value[0])) return;
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      ga[i] += self.grad[0] * std::exp(pa.value[i] - self.value[0]);
    }
  });
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  double total = 0.0;
  for (double x : a.data()) total += x;
  return make_result({1}, {total}, {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    double* ga = pa.grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < pa.value.size(); ++i) ga[i] += self.grad[0];
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  require_defined("sum", a);
  if (a.rank() != 2 || axis > 1) {
    shape_fail("sum", "axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  auto av = a.data();
  std::vector<double> out(axis == 0 ? n : m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += av[i * n + j];
  }
  const std::size_t len = out.size();
  return make_result({len}, std::move(out), {a}, [m, n, axis](Node& self) {
    double* ga = self.parents[0]->grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[axis == 0 ? j : i];
    }
  });
}

Tensor mean(const Tensor& a) {
  require_defined("mean", a);
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor max(const Tensor& a) {
  require_defined("max", a);
  auto av = a.data();
  const std::size_t arg =
      static_cast<std::size_t>(std::max_element(av.begin(), av.end()) - av.begin());
  return make_result({1}, {av[arg]}, {a}, [arg](Node& self) {
    double* ga = self.parents[0]->grad_buffer();
    if (ga != nullptr) ga[arg] += self.grad[0];
  });
}

Tensor row_norms(const Tensor& a) {
  require_defined("row_norms", a);
  if (a.rank() != 2) shape_fail("row_norms", "expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  auto av = a.data();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += av[i * n + j] * av[i * n + j];
    out[i] = std::sqrt(ss);
  }
  return make_result({m}, std::move(out), {a}, [m, n](Node& self) {
    Node& pa = *self.parents[0];
    double* ga = pa.grad_buffer();
    if (ga == nullptr) return;
    for (std::size_t i = 0; i < m; ++i) {
      if (self.value[i] == 0.0) continue;
      const double f = self.grad[i] / self.value[i];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += f * pa.value[i * n + j];
    }
  });
}

Tensor l2_norm(const Tensor& a) {
  require_defined("l2_norm", a);
  return reshape(row_norms(reshape(a, {1, a.size()})), {1});
}

Tensor embedding_lookup(const Tensor& table, std::size_t id) {
  require_defined("embedding_lookup", table);
  if (table.rank() != 2) {
    shape_fail("embedding_lookup", "expected rank-2 table, got " + shape_str(table.shape()));
  }
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  if (id >= rows) {
    throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " out of range for " +
                            std::to_string(rows) + " rows");
  }
  auto tv = table.data();
  std::vector<double> out(tv.begin() + static_cast<std::ptrdiff_t>(id * width),
                          tv.begin() + static_cast<std::ptrdiff_t>((id + 1) * width));
  return make_result({width}, std::move(out), {table}, [id, width](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    if (g == nullptr) return;
    for (std::size_t j = 0; j < width; ++j) g[id * width + j] += self.grad[j];
  });
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target) {
  require_defined("cross_entropy_with_logits", logits);
  if (logits.rank() != 1) {
    shape_fail("cross_entropy_with_logits", "expected rank-1 logits, got " + shape_str(logits.shape()));
  }
  if (target >= logits.size()) {
    throw std::out_of_range("cross_entropy_with_logits: target " + std::to_string(target) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
  }
  auto lv = logits.data();
  const double mx = *std::max_element(lv.begin(), lv.end());
  double total = 0.0;
  for (double x : lv) total += std::exp(x - mx);
  const double lse = mx + std::log(total);
  return make_result({1}, {lse - lv[target]}, {logits}, [target, lse](Node& self) {
    Node& pa = *self.parents[0];
    double* g = pa.grad_buffer();
    if (g == nullptr) return;
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      const double p = std::exp(pa.value[i] - lse);
      g[i] += self.grad[0] * (p - (i == target ? 1.0 : 0.0));
    }
  });
}

// ---- gradient checking -----------------------------------------------------

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "passed" : "FAILED") << " checked=" << checked << " max_rel_error=" << max_rel_error;
  for (const auto& e : worst) {
    os << "\n  input " << e.input << "[" << e.index << "] analytic=" << e.analytic
       << " numeric=" << e.numeric << " rel=" << e.rel_error;
  }
  return os.str();
}

GradCheckReport grad_check(const TensorFunction& f, std::span<const Tensor> inputs,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  std::vector<Tensor> leaves(inputs.begin(), inputs.end());
  for (Tensor& t : leaves) {
    if (!t.requires_grad() || !t.is_leaf()) {
      throw std::invalid_argument("grad_check: inputs must be requires_grad leaves");
    }
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    const Tensor loss = f(leaves);
    tape.backward(loss);
  }
  for (Tensor& t : leaves) {
    auto g = t.grad();
    analytic.emplace_back(g.empty() ? std::vector<double>(t.size(), 0.0)
                                    : std::vector<double>(g.begin(), g.end()));
    t.zero_grad();
  }

  NoGradGuard no_grad;
  GradCheckReport report;
  std::vector<GradCheckEntry> entries;
  const double h = options.step;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto data = leaves[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double original = data[i];
      data[i] = original + h;
      const double plus = f(leaves).item();
      data[i] = original - h;
      const double minus = f(leaves).item();
      data[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      entries.push_back({k, i, a, numeric, std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity()});
      report.max_rel_error = std::max(report.max_rel_error, entries.back().rel_error);
      ++report.checked;
    }
  }
  const std::size_t keep = std::min(options.report_worst, entries.size());
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(),
                    [](const auto& x, const auto& y) { return x.rel_error > y.rel_error; });
  report.worst.assign(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep));
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace vmed::ad
