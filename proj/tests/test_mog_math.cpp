#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "vmed/mog_math.hpp"

using namespace vmed::mog;
namespace ad = vmed::ad;

namespace {

DiagGaussian g1(double mean, double sd) { return DiagGaussian({mean}, {sd}); }

double normal_pdf(double x, double m, double s) {
  const double z = (x - m) / s;
  return std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * std::numbers::pi));
}

// Independent 1-D oracle: composite trapezoid on a uniform grid, written
// against raw densities rather than the library's log_density.
double trapezoid_kl(double fm, double fs, const std::vector<std::tuple<double, double, double>>& g) {
  const double lo = fm - 15.0 * fs;
  const double hi = fm + 15.0 * fs;
  const int n = 400000;
  const double h = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + i * h;
    const double f = normal_pdf(x, fm, fs);
    if (f == 0.0) continue;
    double gx = 0.0;
    for (const auto& [w, m, s] : g) gx += w * normal_pdf(x, m, s);
    const double term = f * std::log(f / gx);
    total += (i == 0 || i == n) ? 0.5 * term : term;
  }
  return total * h;
}

}  // namespace

TEST_CASE("type invariants are enforced") {
  CHECK_THROWS_AS(DiagGaussian({0.0}, {0.0}), std::invalid_argument);
  CHECK_THROWS_AS(DiagGaussian({0.0}, {-1.0}), std::invalid_argument);
  CHECK_THROWS_AS(DiagGaussian({0.0, 1.0}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(DiagGaussian({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(MixtureOfGaussians({0.5, 0.4}, {g1(0, 1), g1(1, 1)}), std::invalid_argument);
  CHECK_THROWS_AS(MixtureOfGaussians({1.2, -0.2}, {g1(0, 1), g1(1, 1)}), std::invalid_argument);
  CHECK_THROWS_AS(MixtureOfGaussians({0.5, 0.5}, {g1(0, 1), DiagGaussian({0, 0}, {1, 1})}), std::invalid_argument);
  CHECK_NOTHROW(MixtureOfGaussians({0.5, 0.5 + 5e-10}, {g1(0, 1), g1(1, 1)}));
}

TEST_CASE("kl_gauss_gauss closed form against the trapezoid oracle") {
  CHECK(kl_gauss_gauss(DiagGaussian({0, 0}, {1, 1}), DiagGaussian({0, 0}, {1, 1})) == 0.0);
  const double kl1 = kl_gauss_gauss(g1(1, 1), g1(0, 1));
  CHECK(kl1 == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(kl1 == doctest::Approx(trapezoid_kl(1, 1, {{1.0, 0.0, 1.0}})).epsilon(1e-8));
  const double kl2 = kl_gauss_gauss(g1(0, 2), g1(0, 1));
  CHECK(kl2 == doctest::Approx(1.5 - std::log(2.0)).epsilon(1e-14));
  CHECK(kl2 == doctest::Approx(trapezoid_kl(0, 2, {{1.0, 0.0, 1.0}})).epsilon(1e-8));
  CHECK_THROWS_AS((void)kl_gauss_gauss(g1(0, 1), DiagGaussian({0, 0}, {1, 1})), std::invalid_argument);
}

TEST_CASE("kl_gauss_gauss is nonnegative on random inputs") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> mean(-5, 5);
  std::uniform_real_distribution<double> logsd(-3, 2);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 1 + i % 4;
    std::vector<double> m1(d), s1(d), m2(d), s2(d);
    for (std::size_t j = 0; j < d; ++j) {
      m1[j] = mean(rng);
      m2[j] = mean(rng);
      s1[j] = std::exp(logsd(rng));
      s2[j] = std::exp(logsd(rng));
    }
    REQUIRE(kl_gauss_gauss(DiagGaussian(m1, s1), DiagGaussian(m2, s2)) >= 0.0);
  }
}

TEST_CASE("d_var trivial cases") {
  const DiagGaussian f = g1(0.3, 1.7);
  CHECK(d_var(f, MixtureOfGaussians(f)) == 0.0);
  CHECK(std::abs(d_var(f, MixtureOfGaussians({0.5, 0.5}, {f, f}))) < 1e-15);
}

TEST_CASE("d_var equals the closed-form KL for a single mode") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int i = 0; i < 10000; ++i) {
    const DiagGaussian f({u(rng), u(rng)}, {std::exp(u(rng) / 3), std::exp(u(rng) / 3)});
    const DiagGaussian g({u(rng), u(rng)}, {std::exp(u(rng) / 3), std::exp(u(rng) / 3)});
    REQUIRE(std::abs(d_var(f, MixtureOfGaussians(g)) - kl_gauss_gauss(f, g)) <= 1e-12);
  }
}

TEST_CASE("d_var upper-bounds a Monte-Carlo KL estimate on a two-mode prior") {
  const DiagGaussian f = g1(0, 1);
  const MixtureOfGaussians g({0.5, 0.5}, {g1(-2, 1), g1(2, 1)});
  const McEstimate mc = mc_kl_estimate(f, g, 1000000, 17);
  const double dv = d_var(f, g);
  // D_var = -log(exp(-2)) = 2 here; the true KL is much smaller.
  CHECK(dv == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(dv >= mc.estimate + 3.0 * mc.std_error);
  // The trapezoid oracle agrees with the MC estimate.
  const double truth = trapezoid_kl(0, 1, {{0.5, -2.0, 1.0}, {0.5, 2.0, 1.0}});
  CHECK(std::abs(mc.estimate - truth) <= 3.0 * mc.std_error);
}

TEST_CASE("d_var stays finite for distant modes") {
  const DiagGaussian f({0, 0}, {1, 1});
  const MixtureOfGaussians g({0.3, 0.7}, {DiagGaussian({1000, 0}, {1, 1}), DiagGaussian({0, -1000}, {1, 1})});
  const double v = d_var(f, g);
  CHECK(std::isfinite(v));
  // Both modes sit at KL = 5e5; the mixture weights only shift the log.
  CHECK(v == doctest::Approx(500000.0 - std::log(1.0)).epsilon(1e-12));
}

TEST_CASE("mc_kl_estimate properties") {
  const McEstimate same = mc_kl_estimate(g1(0.5, 2.0), MixtureOfGaussians(g1(0.5, 2.0)), 20000, 3);
  CHECK(std::abs(same.estimate) <= 3.0 * same.std_error + 1e-15);
  const McEstimate shifted = mc_kl_estimate(g1(1, 1), MixtureOfGaussians(g1(0, 1)), 200000, 4);
  CHECK(std::abs(shifted.estimate - 0.5) <= 3.0 * shifted.std_error);
  const McEstimate again = mc_kl_estimate(g1(1, 1), MixtureOfGaussians(g1(0, 1)), 200000, 4);
  CHECK(again.estimate == shifted.estimate);
  CHECK(again.std_error == shifted.std_error);
  CHECK_THROWS_AS((void)mc_kl_estimate(g1(1, 1), MixtureOfGaussians(g1(0, 1)), 0, 4), std::invalid_argument);

  const MixtureOfGaussians g({0.2, 0.5, 0.3}, {g1(-1, 0.5), g1(0.5, 1.5), g1(3, 0.8)});
  const McEstimate mc = mc_kl_estimate(g1(0.2, 1.1), g, 400000, 5);
  CHECK(std::abs(mc.estimate - quadrature_kl(g1(0.2, 1.1), g)) <= 3.0 * mc.std_error);
}

TEST_CASE("quadrature_kl examples") {
  CHECK(std::abs(quadrature_kl(g1(0.4, 0.7), MixtureOfGaussians(g1(0.4, 0.7)))) <= 1e-8);
  CHECK(std::abs(quadrature_kl(g1(1, 1), MixtureOfGaussians(g1(0, 1))) - 0.5) <= 1e-6);
  CHECK_THROWS_AS((void)quadrature_kl(DiagGaussian({0, 0}, {1, 1}), MixtureOfGaussians(DiagGaussian({0, 0}, {1, 1}))),
                  std::invalid_argument);

  const MixtureOfGaussians g({0.6, 0.4}, {g1(-1, 0.5), g1(2, 2)});
  const double q = quadrature_kl(g1(0.5, 0.8), g);
  CHECK(q == doctest::Approx(trapezoid_kl(0.5, 0.8, {{0.6, -1, 0.5}, {0.4, 2, 2}})).epsilon(1e-7));
  CHECK(q <= d_var(g1(0.5, 0.8), g) + 1e-6);
}

TEST_CASE("quadrature_kl never exceeds d_var on random 1-D pairs") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> mean(-3, 3);
  std::uniform_real_distribution<double> logsd(-1.5, 1.0);
  for (int i = 0; i < 300; ++i) {
    const DiagGaussian f = g1(mean(rng), std::exp(logsd(rng)));
    const std::size_t k = 1 + i % 5;
    std::vector<double> w(k);
    std::vector<DiagGaussian> comps;
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      total += w[c] = 0.1 + std::uniform_real_distribution<double>(0, 1)(rng);
      comps.push_back(g1(mean(rng), std::exp(logsd(rng))));
    }
    for (double& x : w) x /= total;
    const MixtureOfGaussians g(w, comps);
    REQUIRE(quadrature_kl(f, g) <= d_var(f, g) + 1e-6);
  }
}

TEST_CASE("product of two standard normals") {
  const ScaledGaussian p = product_gauss(g1(0, 1), g1(0, 1));
  CHECK(p.scale() == doctest::Approx(1.0 / std::sqrt(4.0 * std::numbers::pi)).epsilon(1e-14));
  CHECK(p.gaussian.mean()[0] == 0.0);
  CHECK(p.gaussian.stddev()[0] * p.gaussian.stddev()[0] == doctest::Approx(0.5).epsilon(1e-15));
  for (double x : {-1.0, 0.0, 0.7}) {
    const double direct = normal_pdf(x, 0, 1) * normal_pdf(x, 0, 1);
    CHECK(std::exp(p.log_density(std::span<const double>(&x, 1))) == doctest::Approx(direct).epsilon(1e-13));
  }
}

TEST_CASE("product of identical Gaussians keeps the mean") {
  const ScaledGaussian p = product_gauss(DiagGaussian({1.5, -2}, {0.3, 4}), DiagGaussian({1.5, -2}, {0.3, 4}));
  CHECK(p.gaussian.mean()[0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(p.gaussian.mean()[1] == doctest::Approx(-2.0).epsilon(1e-15));
  CHECK_THROWS_AS((void)product_gauss(g1(0, 1), DiagGaussian({0, 0}, {1, 1})), std::invalid_argument);
}

TEST_CASE("product_gauss pointwise identity in three dimensions") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-2, 2);
  const DiagGaussian a({u(rng), u(rng), u(rng)}, {0.5, 1.2, 2.0});
  const DiagGaussian b({u(rng), u(rng), u(rng)}, {1.1, 0.4, 0.9});
  const ScaledGaussian p = product_gauss(a, b);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> x{u(rng), u(rng), u(rng)};
    double direct = 1.0;
    for (std::size_t j = 0; j < 3; ++j) {
      direct *= normal_pdf(x[j], a.mean()[j], a.stddev()[j]) * normal_pdf(x[j], b.mean()[j], b.stddev()[j]);
    }
    const double via = std::exp(p.log_density(x));
    REQUIRE(std::abs(via - direct) <= 1e-10 * direct);
  }
}

TEST_CASE("the uninverted covariance fails the pointwise identity") {
  // Sigma_c = Sigma_1^-1 + Sigma_2^-1 (without the outer inverse) gives
  // variance 2 for two unit Gaussians, which cannot match the product.
  const double x = 0.9;
  const double direct = normal_pdf(x, 0, 1) * normal_pdf(x, 0, 1);
  const double scale = 1.0 / std::sqrt(4.0 * std::numbers::pi);
  CHECK(std::abs(scale * normal_pdf(x, 0, std::sqrt(2.0)) - direct) > 1e-3 * direct);
  CHECK(scale * normal_pdf(x, 0, std::sqrt(0.5)) == doctest::Approx(direct).epsilon(1e-14));
}

TEST_CASE("product_mog reduces to product_gauss for single modes") {
  const ScaledMixture m = product_mog(MixtureOfGaussians(g1(0, 1)), MixtureOfGaussians(g1(0, 1)));
  const ScaledGaussian p = product_gauss(g1(0, 1), g1(0, 1));
  CHECK(m.mixture.size() == 1);
  CHECK(m.log_scale == doctest::Approx(p.log_scale).epsilon(1e-15));
  CHECK(m.mixture.components()[0].stddev()[0] == p.gaussian.stddev()[0]);
}

TEST_CASE("product_mog pointwise identity for 2x2 and folded triple products") {
  const MixtureOfGaussians a({0.3, 0.7}, {g1(-1, 0.6), g1(1.2, 1.1)});
  const MixtureOfGaussians b({0.55, 0.45}, {g1(0.4, 0.9), g1(-2, 1.7)});
  const MixtureOfGaussians c({0.1, 0.2, 0.7}, {g1(0, 1), g1(1, 2), g1(-1, 0.5)});
  auto mix_pdf = [](const MixtureOfGaussians& m, double x) {
    double total = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      total += m.weights()[i] * normal_pdf(x, m.components()[i].mean()[0], m.components()[i].stddev()[0]);
    }
    return total;
  };
  const ScaledMixture ab = product_mog(a, b);
  CHECK(ab.mixture.size() == 4);
  double weight_sum = 0.0;
  for (double w : ab.mixture.weights()) weight_sum += w;
  CHECK(weight_sum == doctest::Approx(1.0).epsilon(1e-14));

  const std::vector<MixtureOfGaussians> factors{a, b, c};
  const ScaledMixture abc = product_mog(std::span<const MixtureOfGaussians>(factors));
  CHECK(abc.mixture.size() == 12);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int i = 0; i < 100; ++i) {
    const double x = u(rng);
    const double direct2 = mix_pdf(a, x) * mix_pdf(b, x);
    REQUIRE(std::abs(std::exp(ab.log_density(std::span<const double>(&x, 1))) - direct2) <= 1e-9 * direct2);
    const double direct3 = direct2 * mix_pdf(c, x);
    REQUIRE(std::abs(std::exp(abc.log_density(std::span<const double>(&x, 1))) - direct3) <= 1e-9 * direct3);
  }
  CHECK_THROWS_AS((void)product_mog(std::span<const MixtureOfGaussians>()), std::invalid_argument);
}

TEST_CASE("chebyshev_gap examples") {
  const std::vector<double> ones{1, 1, 1};
  CHECK(chebyshev_gap(ones, ones) == 0.0);
  CHECK(chebyshev_gap(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(chebyshev_gap(std::vector<double>{1, 2}, std::vector<double>{2, 1}) == doctest::Approx(-0.25).epsilon(1e-15));
  CHECK_THROWS_AS((void)chebyshev_gap(std::vector<double>{1, 2}, std::vector<double>{1}), std::invalid_argument);
}

TEST_CASE("reparam_sample") {
  const DiagGaussian q({1.0, -2.0}, {0.5, 3.0});
  CHECK(reparam_sample(q, std::vector<double>{0, 0}) == q.mean());
  const std::vector<double> e{0.3, -1.2};
  CHECK(reparam_sample(DiagGaussian({0, 0}, {1, 1}), e) == e);
  CHECK_THROWS_AS((void)reparam_sample(q, std::vector<double>{0}), std::invalid_argument);

  std::mt19937_64 rng(10);
  std::normal_distribution<double> normal;
  const DiagGaussian q1 = g1(2.0, 3.0);
  const std::size_t n = 100000;
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    const double eps = normal(rng);
    const double z = reparam_sample(q1, std::span<const double>(&eps, 1))[0];
    const double delta = z - mean;
    mean += delta / static_cast<double>(i);
    m2 += delta * (z - mean);
  }
  const double sd = std::sqrt(m2 / static_cast<double>(n - 1));
  CHECK(std::abs(mean - 2.0) <= 3.0 * 3.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(sd - 3.0) <= 3.0 * 3.0 / std::sqrt(2.0 * static_cast<double>(n)));
}

TEST_CASE("tensor forms agree with the value forms and differentiate correctly") {
  const GaussianTensor f{ad::Tensor::parameter({2}, {0.3, -0.7}), ad::Tensor::parameter({2}, {0.8, 1.4})};
  MixtureTensor g;
  g.weights = ad::Tensor::parameter({3}, {0.2, 0.5, 0.3});
  g.components.push_back({ad::Tensor::parameter({2}, {1.0, 0.0}), ad::Tensor::parameter({2}, {1.0, 0.5})});
  g.components.push_back({ad::Tensor::parameter({2}, {-1.0, 2.0}), ad::Tensor::parameter({2}, {2.0, 0.7})});
  g.components.push_back({ad::Tensor::parameter({2}, {0.0, -1.0}), ad::Tensor::parameter({2}, {0.6, 1.1})});

  CHECK(d_var(f, g).item() == doctest::Approx(d_var(f.value(), g.value())).epsilon(1e-14));
  CHECK(kl_gauss_gauss(f, g.components[1]).item() ==
        doctest::Approx(kl_gauss_gauss(f.value(), g.components[1].value())).epsilon(1e-14));

  std::vector<ad::Tensor> inputs{f.mean, f.stddev, g.weights};
  for (const auto& c : g.components) {
    inputs.push_back(c.mean);
    inputs.push_back(c.stddev);
  }
  const ad::GradCheckReport report = ad::grad_check(
      [&](std::span<const ad::Tensor> in) {
        MixtureTensor m;
        m.weights = in[2];
        for (std::size_t i = 0; i < 3; ++i) m.components.push_back({in[3 + 2 * i], in[4 + 2 * i]});
        const ad::Tensor eps = ad::Tensor::vector({0.4, -1.3});
        return d_var(GaussianTensor{in[0], in[1]}, m) + ad::sum(reparam_sample(GaussianTensor{in[0], in[1]}, eps));
      },
      inputs);
  INFO(report.summary());
  CHECK(report.passed);
}
