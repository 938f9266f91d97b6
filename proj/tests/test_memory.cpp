#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "vmed/memory.hpp"

using namespace vmed::mem;
namespace ad = vmed::ad;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> out(n);
  for (double& x : out) x = u(rng);
  return out;
}

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> w = random_values(rng, n, 0.01, 1.0);
  double total = 0.0;
  for (double x : w) total += x;
  for (double& x : w) x /= total;
  return w;
}

MemoryState random_state(std::mt19937_64& rng, std::size_t n, std::size_t width) {
  MemoryState s = initial_state({n, width, 1});
  s.matrix = ad::Tensor::constant({n, width}, random_values(rng, n * width));
  return s;
}

double sum_of(std::span<const double> v) {
  double t = 0.0;
  for (double x : v) t += x;
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(MemoryConfig{}.validate());
  CHECK_THROWS_AS((MemoryConfig{16, 63, 1}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((MemoryConfig{16, 64, 0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((MemoryConfig{2, 64, 3}.validate()), std::invalid_argument);
}

TEST_CASE("initial state") {
  const MemoryState s = initial_state({4, 6, 2});
  CHECK(s.matrix.shape() == ad::Shape{4, 6});
  REQUIRE(s.read_weights.size() == 2);
  REQUIRE(s.read_vectors.size() == 2);
  for (const auto& w : s.read_weights) {
    for (double x : w.data()) CHECK(x == 0.25);
  }
  for (const auto& r : s.read_vectors) {
    for (double x : r.data()) CHECK(x == 0.0);
  }
}

TEST_CASE("content_address with zero strength is uniform") {
  std::mt19937_64 rng(1);
  const MemoryState s = random_state(rng, 5, 4);
  const ad::Tensor w = content_address(s.matrix, ad::Tensor::vector(random_values(rng, 4)), ad::Tensor::vector({0.0}));
  for (double x : w.data()) CHECK(x == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("content_address concentrates on a matching row") {
  const ad::Tensor m = ad::Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const ad::Tensor w = content_address(m, ad::Tensor::vector({0, 1, 0}), ad::Tensor::vector({50.0}));
  CHECK(w.at(1) > 0.999);
  CHECK(sum_of(w.data()) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("content_address ignores key scale") {
  std::mt19937_64 rng(2);
  const MemoryState s = random_state(rng, 6, 4);
  const std::vector<double> key = random_values(rng, 4);
  std::vector<double> scaled = key;
  for (double& x : scaled) x *= 7.5;
  const ad::Tensor a = content_address(s.matrix, ad::Tensor::vector(key), ad::Tensor::vector({3.0}));
  const ad::Tensor b = content_address(s.matrix, ad::Tensor::vector(scaled), ad::Tensor::vector({3.0}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-7));
}

TEST_CASE("content_address rejects bad inputs") {
  const ad::Tensor m = ad::Tensor::zeros({3, 4});
  CHECK_THROWS_AS((void)content_address(m, ad::Tensor::zeros({3}), ad::Tensor::vector({1.0})), ad::ShapeError);
  CHECK_THROWS_AS((void)content_address(m, ad::Tensor::zeros({4}), ad::Tensor::vector({-1.0})),
                  std::invalid_argument);
}

TEST_CASE("write replaces a slot when weight and erase are one-hot and full") {
  std::mt19937_64 rng(3);
  const MemoryState s = random_state(rng, 4, 2);
  const ad::Tensor add = ad::Tensor::vector({0.5, -0.25});
  const MemoryState next =
      write(s, ad::Tensor::full({2}, 1.0), add, ad::Tensor::vector({0.0, 0.0, 1.0, 0.0}));
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t c = 0; c < 2; ++c) {
      const double expected = j == 2 ? add.at(c) : s.matrix.at(j * 2 + c);
      CHECK(next.matrix.at(j * 2 + c) == expected);
    }
  }
}

TEST_CASE("write with zero weight is a no-op") {
  std::mt19937_64 rng(4);
  const MemoryState s = random_state(rng, 4, 2);
  const MemoryState next =
      write(s, ad::Tensor::full({2}, 0.7), ad::Tensor::full({2}, 0.3), ad::Tensor::zeros({4}));
  for (std::size_t i = 0; i < 8; ++i) CHECK(next.matrix.at(i) == s.matrix.at(i));
}

TEST_CASE("write matches the erase/add formula elementwise") {
  std::mt19937_64 rng(5);
  const MemoryState s = random_state(rng, 5, 4);
  const std::vector<double> e = random_values(rng, 4, 0.0, 1.0);
  const std::vector<double> a = random_values(rng, 4);
  const std::vector<double> w = random_simplex(rng, 5);
  const MemoryState next =
      write(s, ad::Tensor::vector(e), ad::Tensor::vector(a), ad::Tensor::vector(w));
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double expected = s.matrix.at(j * 4 + c) * (1.0 - w[j] * e[c]) + w[j] * a[c];
      CHECK(std::abs(next.matrix.at(j * 4 + c) - expected) <= 1e-12);
    }
  }
  CHECK(next.write_weight.to_vector() == w);
}

TEST_CASE("repeated writes with erase and add in (0,1) stay bounded") {
  std::mt19937_64 rng(6);
  MemoryState s = random_state(rng, 6, 4);
  for (int t = 0; t < 200; ++t) {
    s = write(s, ad::Tensor::vector(random_values(rng, 4, 0.0, 1.0)), ad::Tensor::vector(random_values(rng, 4)),
              ad::Tensor::vector(random_simplex(rng, 6)));
    for (double x : s.matrix.data()) REQUIRE(std::abs(x) <= 1.0 + 1e-12);
  }
}

TEST_CASE("read returns weighted slot combinations") {
  const ad::Tensor m = ad::Tensor::constant({3, 2}, {1, 0, 0, 1, -1, 0});
  MemoryState s = initial_state({3, 2, 1});
  s.matrix = m;
  InterfaceVector iface;
  iface.read_heads.push_back({ad::Tensor::vector({0, 1}), ad::Tensor::vector({200.0})});
  iface.read_heads.push_back({ad::Tensor::vector({1, 0}), ad::Tensor::vector({0.0})});
  const ReadResult r = read(s, iface);
  REQUIRE(r.read_vectors.size() == 2);
  CHECK(r.read_vectors[0].at(0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.read_vectors[0].at(1) == doctest::Approx(1.0).epsilon(1e-12));
  // Uniform weights give the column means.
  CHECK(r.read_vectors[1].at(0) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
  CHECK(r.read_vectors[1].at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937_64 rng(7);
  const MemoryState rs = random_state(rng, 5, 4);
  InterfaceVector one;
  one.read_heads.push_back({ad::Tensor::vector(random_values(rng, 4)), ad::Tensor::vector({2.5})});
  const ReadResult rr = read(rs, one);
  const ad::Tensor w = rr.read_weights[0];
  for (std::size_t c = 0; c < 4; ++c) {
    double expected = 0.0;
    for (std::size_t j = 0; j < 5; ++j) expected += w.at(j) * rs.matrix.at(j * 4 + c);
    CHECK(std::abs(rr.read_vectors[0].at(c) - expected) <= 1e-12);
  }
}

TEST_CASE("address weights stay on the simplex") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 500; ++i) {
    const MemoryState s = random_state(rng, 8, 6);
    const double strength = std::uniform_real_distribution<double>(0.0, 100.0)(rng);
    const ad::Tensor w =
        content_address(s.matrix, ad::Tensor::vector(random_values(rng, 6)), ad::Tensor::vector({strength}));
    for (double x : w.data()) REQUIRE(x >= 0.0);
    REQUIRE(std::abs(sum_of(w.data()) - 1.0) <= 1e-9);
  }
}

TEST_CASE("mode_weights") {
  const std::vector<ad::Tensor> single{ad::Tensor::vector({0.1, 0.9})};
  CHECK(mode_weights(single).to_vector() == std::vector<double>{1.0});

  const std::vector<ad::Tensor> two{ad::Tensor::vector({0.8, 0.1, 0.1}), ad::Tensor::vector({0.2, 0.2, 0.2})};
  const ad::Tensor pi = mode_weights(two);
  CHECK(pi.at(0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(pi.at(1) == doctest::Approx(0.2).epsilon(1e-15));

  const std::vector<ad::Tensor> tiny{ad::Tensor::vector({1e-13, 0.0}), ad::Tensor::vector({0.0, 5e-13}),
                                     ad::Tensor::vector({0.0, 0.0})};
  const ad::Tensor uniform = mode_weights(tiny);
  for (double x : uniform.data()) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  CHECK_THROWS_AS((void)mode_weights(std::vector<ad::Tensor>{}), std::invalid_argument);
}

TEST_CASE("mode_weights is permutation equivariant and on the simplex") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    std::vector<ad::Tensor> ws;
    for (int k = 0; k < 4; ++k) ws.push_back(ad::Tensor::vector(random_simplex(rng, 6)));
    const std::vector<double> pi = mode_weights(ws).to_vector();
    REQUIRE(std::abs(sum_of(pi) - 1.0) <= 1e-12);
    for (double x : pi) REQUIRE(x > 0.0);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<ad::Tensor> permuted;
    for (std::size_t p : perm) permuted.push_back(ws[p]);
    const std::vector<double> pp = mode_weights(permuted).to_vector();
    for (std::size_t k = 0; k < 4; ++k) REQUIRE(pp[k] == doctest::Approx(pi[perm[k]]).epsilon(1e-15));
  }
}

TEST_CASE("interface layout") {
  const InterfaceLayout layout(4, 2);
  CHECK(layout.size() == 2 * 5 + 3 * 4 + 1);
  std::vector<double> raw(layout.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<double>(i) / 10.0 - 1.0;
  const InterfaceVector iface = layout.parse(ad::Tensor::vector(raw));
  REQUIRE(iface.read_heads.size() == 2);
  CHECK(iface.read_heads[0].key.to_vector() == std::vector<double>(raw.begin(), raw.begin() + 4));
  CHECK(iface.read_heads[0].strength.item() == doctest::Approx(std::log1p(std::exp(raw[4]))).epsilon(1e-14));
  CHECK(iface.read_heads[1].key.to_vector() == std::vector<double>(raw.begin() + 5, raw.begin() + 9));
  CHECK(iface.write.key.to_vector() == std::vector<double>(raw.begin() + 10, raw.begin() + 14));
  CHECK(iface.write.strength.item() == doctest::Approx(std::log1p(std::exp(raw[14]))).epsilon(1e-14));
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(iface.write.erase.at(c) == doctest::Approx(1.0 / (1.0 + std::exp(-raw[15 + c]))).epsilon(1e-14));
    CHECK(iface.write.add.at(c) == doctest::Approx(std::tanh(raw[19 + c])).epsilon(1e-14));
  }
  CHECK_THROWS_AS((void)layout.parse(ad::Tensor::zeros({layout.size() + 1})), ad::ShapeError);
  CHECK(InterfaceLayout(4, 0).size() == 13);
}

TEST_CASE("gradients through a two-step access chain") {
  std::mt19937_64 rng(10);
  const InterfaceLayout layout(4, 2);
  std::vector<ad::Tensor> inputs{
      ad::Tensor::parameter({5, 4}, random_values(rng, 20)),
      ad::Tensor::parameter({layout.size()}, random_values(rng, layout.size())),
      ad::Tensor::parameter({layout.size()}, random_values(rng, layout.size())),
  };
  const ad::GradCheckReport report = ad::grad_check(
      [&](std::span<const ad::Tensor> in) {
        MemoryState s = initial_state({5, 4, 2});
        s.matrix = in[0];
        s = access(s, layout.parse(in[1]));
        s = access(s, layout.parse(in[2]));
        const ad::Tensor pi = mode_weights(s.read_weights);
        return ad::sum(s.read_vectors[0] * s.read_vectors[1]) + ad::sum(pi * pi) + ad::sum(s.matrix * s.matrix);
      },
      inputs);
  INFO(report.summary());
  CHECK(report.passed);
}

TEST_CASE("access writes before reading") {
  std::mt19937_64 rng(11);
  const InterfaceLayout layout(4, 1);
  const MemoryState s = random_state(rng, 5, 4);
  const InterfaceVector iface = layout.parse(ad::Tensor::vector(random_values(rng, layout.size())));
  const MemoryState next = access(s, iface);
  const ad::Tensor w = content_address(s.matrix, iface.write.key, iface.write.strength);
  const MemoryState written = write(s, iface.write.erase, iface.write.add, w);
  for (std::size_t i = 0; i < 20; ++i) CHECK(next.matrix.at(i) == written.matrix.at(i));
  const ReadResult r = read(written, iface);
  CHECK(next.read_vectors[0].to_vector() == r.read_vectors[0].to_vector());
}
