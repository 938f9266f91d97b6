#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// Graphs are built define-by-run: every op whose inputs require gradients
// records a node on the thread's active Tape. Tape::backward walks the
// recorded nodes in reverse creation order, which is a valid topological
// order because parents are always created before their children.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmed::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Node;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor parameter(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Only leaves may be mutated in place (optimizer updates, finite differences).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  bool is_leaf() const;
  // Empty until a backward pass has touched this tensor.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Constant copy with no history.
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records differentiable ops for the current thread while alive. Tapes nest;
// destroying a tape reinstates the one that was active before it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<detail::Node> node);
  std::size_t size() const { return nodes_.size(); }

  // Accumulates dLoss/dLeaf into every requires_grad leaf reachable from loss.
  void backward(const Tensor& loss);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* previous_ = nullptr;
};

// Disables recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Runs backward on the active tape.
void backward(const Tensor& loss);

// ---- forward ops -----------------------------------------------------------
//
// Broadcasting is limited to a size-1 operand against any shape, and (for add)
// a rank-1 row bias of length n against an (m, n) matrix.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor shift(const Tensor& a, double offset);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return shift(neg(a), c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// (m,k)x(k,n) -> (m,n) and (m,k)x(k) -> (m).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// Rank-1 only.
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
Tensor slice(const Tensor& a, std::size_t start, std::size_t length);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);

// axis indexes the dimension normalized over; rank 1 or 2.
Tensor softmax(const Tensor& a, std::size_t axis = 0);
Tensor logsumexp(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
// Gradient flows to the first maximal element.
Tensor max(const Tensor& a);
// Euclidean norm of each row of a matrix; zero rows get zero gradient.
Tensor row_norms(const Tensor& a);
Tensor l2_norm(const Tensor& a);

Tensor embedding_lookup(const Tensor& table, std::size_t id);
// -log softmax(logits)[target] for a rank-1 logits vector.
Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target);

// ---- gradient checking -----------------------------------------------------

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative errors use max(|analytic|, |numeric|, abs_floor) as denominator,
  // so vanishing gradients are compared in absolute terms.
  double abs_floor = 1e-5;
  std::size_t report_worst = 5;
};

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  bool passed = true;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> worst;  // sorted by descending rel_error

  std::string summary() const;
};

using TensorFunction = std::function<Tensor(std::span<const Tensor>)>;

// Compares tape gradients of f with central differences for every element of
// every input. Inputs must be requires_grad leaves; their grads are left zeroed.
GradCheckReport grad_check(const TensorFunction& f, std::span<const Tensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace vmed::ad
