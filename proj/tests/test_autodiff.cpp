#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <thread>

#include "vmed/autodiff.hpp"
#include "vmed/model.hpp"

using namespace vmed::ad;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

Tensor random_param(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return Tensor::parameter(shape, random_values(rng, numel(shape), lo, hi));
}

// Contract an op's output against fixed random weights so every output
// element gets a distinct upstream gradient.
Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(y * Tensor::constant(y.shape(), random_values(rng, y.size())));
}

void check_op(const char* name, const TensorFunction& f, const std::vector<Tensor>& inputs, double tol = 1e-4) {
  CAPTURE(name);
  GradCheckOptions opts;
  opts.tolerance = tol;
  const GradCheckReport report = grad_check(f, inputs, opts);
  INFO(report.summary());
  CHECK(report.passed);
  CHECK(report.checked > 0);
}

}  // namespace

TEST_CASE("closed-form op values") {
  CHECK(softplus(Tensor::scalar(0.0)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const Tensor s = softmax(Tensor::full({4}, 3.7));
  for (double x : s.data()) CHECK(x == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(logsumexp(Tensor::vector({1000.0, 1000.0})).item() == doctest::Approx(1000.0 + std::log(2.0)));
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  // Large logits must not overflow.
  CHECK(std::isfinite(softplus(Tensor::scalar(800.0)).item()));
  CHECK(softplus(Tensor::scalar(-800.0)).item() >= 0.0);
}

TEST_CASE("softplus derivative at zero is one half") {
  Tape tape;
  Tensor x = Tensor::parameter({1}, {0.0});
  tape.backward(softplus(x));
  CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("backward of sum and sum of squares") {
  Tape tape;
  Tensor x = Tensor::parameter({3}, {1.0, 2.0, 3.0});
  tape.backward(sum(x));
  CHECK(x.to_vector() == std::vector<double>{1.0, 2.0, 3.0});
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1.0, 1.0, 1.0});
  x.zero_grad();
  Tape tape2;
  tape2.backward(sum(x * x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("repeated backward accumulates") {
  Tensor x = Tensor::parameter({2}, {1.0, -1.0});
  for (int i = 0; i < 3; ++i) {
    Tape tape;
    tape.backward(sum(x * 2.0));
  }
  CHECK(x.grad()[0] == 6.0);
  CHECK(x.grad()[1] == 6.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Tape tape;
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  CHECK_THROWS_AS(tape.backward(x * 2.0), ShapeError);
}

TEST_CASE("shape errors name the op and shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("2") != std::string::npos);
  }
  CHECK_THROWS_AS((void)add(Tensor::zeros({3}), Tensor::zeros({4})), ShapeError);
  CHECK_THROWS_AS((void)concat({Tensor::zeros({2, 2}), Tensor::zeros({2})}), ShapeError);
  CHECK_THROWS_AS((void)slice(Tensor::zeros({3}), 2, 2), ShapeError);
}

TEST_CASE("broadcasting is limited to size-1 operands and row biases") {
  const Tensor m = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row = Tensor::vector({10, 20, 30});
  CHECK((m + row).to_vector() == std::vector<double>{11, 22, 33, 14, 25, 36});
  CHECK((m * Tensor::scalar(2.0)).to_vector() == std::vector<double>{2, 4, 6, 8, 10, 12});
  CHECK_THROWS_AS((void)mul(m, row), ShapeError);
  CHECK_THROWS_AS((void)add(m, Tensor::vector({1, 2})), ShapeError);
}

TEST_CASE("no gradients are recorded without a tape or under NoGradGuard") {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  Tape tape;
  {
    NoGradGuard guard;
    const Tensor y = x * x;
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
  const Tensor y = x * x;
  CHECK(y.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("per-op finite-difference gradient checks") {
  std::mt19937_64 rng(42);
  const Tensor a = random_param(rng, {3, 4});
  const Tensor b = random_param(rng, {3, 4});
  const Tensor pos = random_param(rng, {3, 4}, 0.5, 2.0);
  const Tensor m = random_param(rng, {4, 2});
  const Tensor v = random_param(rng, {4});
  const Tensor row = random_param(rng, {4});
  const Tensor s = random_param(rng, {1});
  const Tensor table = random_param(rng, {5, 3});

  check_op("add", [](auto in) { return project(in[0] + in[1], 1); }, {a, b});
  check_op("add_row", [](auto in) { return project(in[0] + in[1], 2); }, {a, row});
  check_op("sub", [](auto in) { return project(in[0] - in[1], 3); }, {a, b});
  check_op("mul", [](auto in) { return project(in[0] * in[1], 4); }, {a, b});
  check_op("mul_scalar", [](auto in) { return project(in[0] * in[1], 5); }, {a, s});
  check_op("div", [](auto in) { return project(in[0] / in[1], 6); }, {a, pos});
  check_op("scale_shift_neg", [](auto in) { return project(-(2.5 * in[0] + 1.0) - 3.0, 7); }, {a});
  check_op("matmul_mm", [](auto in) { return project(matmul(in[0], in[1]), 8); }, {a, m});
  check_op("matmul_mv", [](auto in) { return project(matmul(in[0], in[1]), 9); }, {a, v});
  check_op("transpose", [](auto in) { return project(transpose(in[0]), 10); }, {a});
  check_op("reshape", [](auto in) { return project(reshape(in[0], {2, 6}), 11); }, {a});
  check_op("concat", [](auto in) { return project(concat({in[0], in[1], in[0]}), 12); }, {v, row});
  check_op("slice", [](auto in) { return project(slice(in[0], 1, 2), 13); }, {v});
  check_op("sigmoid", [](auto in) { return project(sigmoid(in[0]), 14); }, {a});
  check_op("tanh", [](auto in) { return project(tanh(in[0]), 15); }, {a});
  check_op("softplus", [](auto in) { return project(softplus(in[0]), 16); }, {a});
  check_op("exp", [](auto in) { return project(exp(in[0]), 17); }, {a});
  check_op("log", [](auto in) { return project(log(in[0]), 18); }, {pos});
  check_op("sqrt", [](auto in) { return project(sqrt(in[0]), 19); }, {pos});
  check_op("softmax_vec", [](auto in) { return project(softmax(in[0]), 20); }, {v});
  check_op("softmax_axis0", [](auto in) { return project(softmax(in[0], 0), 21); }, {a});
  check_op("softmax_axis1", [](auto in) { return project(softmax(in[0], 1), 22); }, {a});
  check_op("logsumexp", [](auto in) { return logsumexp(in[0]) * 1.3; }, {a});
  check_op("sum", [](auto in) { return sum(in[0]) * 0.7; }, {a});
  check_op("sum_axis0", [](auto in) { return project(sum(in[0], 0), 23); }, {a});
  check_op("sum_axis1", [](auto in) { return project(sum(in[0], 1), 24); }, {a});
  check_op("mean", [](auto in) { return mean(in[0]) * 2.0; }, {a});
  check_op("max", [](auto in) { return max(in[0]) * 1.5; }, {v});
  check_op("row_norms", [](auto in) { return project(row_norms(in[0]), 25); }, {a});
  check_op("l2_norm", [](auto in) { return l2_norm(in[0]) * 0.9; }, {v});
  check_op("embedding_lookup", [](auto in) { return project(embedding_lookup(in[0], 3), 26); }, {table});
  check_op("cross_entropy", [](auto in) { return cross_entropy_with_logits(in[0], 2); }, {v});
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  std::mt19937_64 rng(7);
  const Tensor w1 = random_param(rng, {6, 4});
  const Tensor b1 = random_param(rng, {6});
  const Tensor w2 = random_param(rng, {3, 6});
  const Tensor b2 = random_param(rng, {3});
  const Tensor x = Tensor::vector(random_values(rng, 4));
  const GradCheckReport report = grad_check(
      [&](auto in) {
        const Tensor h = tanh(matmul(in[0], x) + in[1]);
        return cross_entropy_with_logits(matmul(in[2], h) + in[3], 1);
      },
      std::vector<Tensor>{w1, b1, w2, b2});
  INFO(report.summary());
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.checked == 6 * 4 + 6 + 3 * 6 + 3);
}

TEST_CASE("grad_check of identity sum is exact up to rounding") {
  const Tensor x = Tensor::parameter({5}, {0.1, -0.2, 0.3, 4.0, -5.0});
  const GradCheckReport report = grad_check([](auto in) { return sum(in[0]); }, std::vector<Tensor>{x});
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-9);
}

TEST_CASE("grad_check reports a wrong gradient") {
  // exp(x) * stop_gradient-like constant: the function is evaluated with a
  // detached factor, so the tape misses one term of the true derivative.
  const Tensor x = Tensor::parameter({3}, {0.3, -0.4, 0.5});
  const GradCheckReport report = grad_check(
      [](auto in) { return sum(in[0] * in[0].detach()); }, std::vector<Tensor>{x});
  CHECK_FALSE(report.passed);
  CHECK_FALSE(report.worst.empty());
  CHECK(report.worst.front().rel_error > 0.1);
}

TEST_CASE("LSTM step gradients match finite differences") {
  std::vector<vmed::NamedParameter> registry;
  const vmed::Lstm lstm("lstm", 3, 4, 2, registry);
  std::mt19937_64 rng(11);
  std::vector<Tensor> inputs;
  for (auto& p : registry) {
    for (double& x : p.tensor.mutable_data()) x = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    inputs.push_back(p.tensor);
  }
  const Tensor x = Tensor::vector(random_values(rng, 3));
  vmed::LstmState h0 = lstm.zero_state();
  h0.h[0] = Tensor::vector(random_values(rng, 4));
  h0.c[1] = Tensor::vector(random_values(rng, 4));
  const GradCheckReport report = grad_check(
      [&](auto) {
        const vmed::LstmState s1 = lstm.step(h0, x);
        const vmed::LstmState s2 = lstm.step(s1, x * 0.5);
        return project(concat({s2.h[1], s2.c[1]}), 99);
      },
      inputs);
  INFO(report.summary());
  CHECK(report.passed);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(5);
  Tensor x = random_param(rng, {4});
  auto grad_of = [&](double wa, double wb) {
    x.zero_grad();
    Tape tape;
    const Tensor f = sum(tanh(x) * x);
    const Tensor g = logsumexp(x * 3.0);
    tape.backward(wa * f + wb * g);
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto gf = grad_of(1.0, 0.0);
  const auto gg = grad_of(0.0, 1.0);
  const auto combo = grad_of(2.5, -1.75);
  for (std::size_t i = 0; i < 4; ++i) {
    const double expected = 2.5 * gf[i] - 1.75 * gg[i];
    CHECK(std::abs(combo[i] - expected) <= 1e-10 * std::max(1.0, std::abs(expected)));
  }
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(3);
    Tensor w = random_param(rng, {5, 5});
    Tensor v = Tensor::vector(random_values(rng, 5));
    Tape tape;
    const Tensor loss = logsumexp(softmax(matmul(w, v)) * 4.0);
    tape.backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("tapes are independent across threads") {
  auto work = [](double scale_factor, double* out) {
    Tensor x = Tensor::parameter({3}, {1.0, 2.0, 3.0});
    Tape tape;
    tape.backward(sum(x * x) * scale_factor);
    *out = x.grad()[2];
  };
  double a = 0.0;
  double b = 0.0;
  std::thread t1(work, 1.0, &a);
  std::thread t2(work, 2.0, &b);
  t1.join();
  t2.join();
  CHECK(a == 6.0);
  CHECK(b == 12.0);
}
