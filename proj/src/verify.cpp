#include "vmed/verify.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <random>
#include <thread>

#include "vmed/seed.hpp"

namespace vmed {

namespace {

using mog::DiagGaussian;
using mog::MixtureOfGaussians;

constexpr double kBoundSlack = 1e-6;
constexpr double kExactTol = 1e-12;
constexpr double kProductTol = 1e-9;
constexpr std::size_t kPointsPerCase = 100;

class CaseRng {
 public:
  explicit CaseRng(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  double log_uniform(double lo, double hi) { return std::exp(uniform(std::log(lo), std::log(hi))); }

  DiagGaussian gaussian(std::size_t d, double mean_range, double sd_lo, double sd_hi) {
    std::vector<double> mean(d);
    std::vector<double> sd(d);
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] = uniform(-mean_range, mean_range);
      sd[j] = log_uniform(sd_lo, sd_hi);
    }
    return DiagGaussian(std::move(mean), std::move(sd));
  }

  MixtureOfGaussians mixture(std::size_t d, std::size_t k, double mean_range, double sd_lo, double sd_hi) {
    std::vector<double> w(k);
    double total = 0.0;
    for (double& x : w) total += x = uniform(0.05, 1.0);
    for (double& x : w) x /= total;
    std::vector<DiagGaussian> comps;
    for (std::size_t i = 0; i < k; ++i) comps.push_back(gaussian(d, mean_range, sd_lo, sd_hi));
    return MixtureOfGaussians(std::move(w), std::move(comps));
  }

  std::vector<double> point_near(const std::vector<const DiagGaussian*>& around) {
    const DiagGaussian& g = *around[index(0, around.size() - 1)];
    std::vector<double> x(g.dim());
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = g.mean()[j] + g.stddev()[j] * uniform(-3.0, 3.0);
    return x;
  }

 private:
  std::mt19937_64 rng_;
};

std::string fmt(double x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

// Tracks the slack of `lhs >= rhs` checks; worst is the smallest lhs - rhs.
struct BoundTracker {
  PropertyResult& r;
  bool first = true;

  void check(double lhs, double rhs, const std::string& label) {
    const double slack = lhs - rhs;
    ++r.cases;
    if (first || slack < r.worst) {
      r.worst = slack;
      r.worst_label = label;
      first = false;
    }
    if (!(slack >= 0.0)) {
      if (r.failures++ == 0) r.first_failure = label + ": " + fmt(lhs) + " < " + fmt(rhs);
    }
  }
};

// Relative error of exp(log_a) vs exp(log_b), computed without leaving log space.
double log_rel_error(double log_a, double log_b) {
  if (log_a == log_b) return 0.0;
  return std::abs(std::expm1(log_b - log_a));
}

// Tracks `error <= tol` checks; worst is the largest error.
void track_rel(PropertyResult& r, double rel, double tol, const std::string& label) {
  if (rel > r.worst || r.worst_label.empty()) {
    r.worst = std::max(r.worst, rel);
    r.worst_label = label;
  }
  if (!(rel <= tol)) {
    if (r.failures++ == 0) r.first_failure = label + ": error " + fmt(rel);
  }
}

std::string case_label(std::size_t i) { return "case " + std::to_string(i); }

}  // namespace

bool VerifyReport::passed() const {
  return std::all_of(properties.begin(), properties.end(), [](const PropertyResult& p) { return p.passed(); });
}

std::string VerifyReport::format() const {
  std::string out;
  for (const PropertyResult& p : properties) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-4s %-28s cases=%-6zu failures=%-5zu worst=%s (%s)\n",
                  p.passed() ? "PASS" : "FAIL", p.name.c_str(), p.cases, p.failures, fmt(p.worst).c_str(),
                  p.worst_label.empty() ? "-" : p.worst_label.c_str());
    out += line;
    if (!p.passed()) out += "     first failure: " + p.first_failure + "\n";
  }
  return out;
}

PropertyResult verify_kl_nonnegative(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "kl_nonnegative";
  BoundTracker t{r};
  CaseRng rng(derive_seed(options.seed, 1, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t d = rng.index(1, 4);
    const DiagGaussian f = rng.gaussian(d, 5.0, 0.05, 5.0);
    // Every tenth case compares a Gaussian with itself, the boundary of the inequality.
    const DiagGaussian g = i % 10 == 0 ? f : rng.gaussian(d, 5.0, 0.05, 5.0);
    t.check(mog::kl_gauss_gauss(f, g), 0.0, case_label(i));
  }
  return r;
}

PropertyResult verify_dvar_bound_quadrature(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "dvar_bound_1d_quadrature";
  BoundTracker t{r};
  CaseRng rng(derive_seed(options.seed, 2, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const DiagGaussian f = rng.gaussian(1, 3.0, 0.2, 3.0);
    const MixtureOfGaussians g = rng.mixture(1, rng.index(1, 5), 3.0, 0.2, 3.0);
    t.check(options.d_var(f, g) + kBoundSlack, mog::quadrature_kl(f, g), case_label(i));
  }
  return r;
}

PropertyResult verify_dvar_bound_monte_carlo(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "dvar_bound_3d_monte_carlo";
  struct Case {
    double lhs = 0.0;
    double rhs = 0.0;
  };
  std::vector<DiagGaussian> fs;
  std::vector<MixtureOfGaussians> gs;
  CaseRng rng(derive_seed(options.seed, 3, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    fs.push_back(rng.gaussian(3, 2.0, 0.3, 2.0));
    gs.push_back(rng.mixture(3, rng.index(1, 5), 2.0, 0.3, 2.0));
  }
  std::vector<Case> results(cases);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cases; i = next++) {
      const mog::McEstimate mc = mog::mc_kl_estimate(fs[i], gs[i], options.mc_samples, derive_seed(options.seed, 4, i));
      results[i] = {options.d_var(fs[i], gs[i]) + 3.0 * mc.std_error, mc.estimate};
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, cases));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (std::thread& th : pool) th.join();

  BoundTracker t{r};
  for (std::size_t i = 0; i < cases; ++i) t.check(results[i].lhs, results[i].rhs, case_label(i));
  return r;
}

PropertyResult verify_dvar_exact_single_mode(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "dvar_exact_single_mode";
  CaseRng rng(derive_seed(options.seed, 5, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t d = rng.index(1, 4);
    const DiagGaussian f = rng.gaussian(d, 5.0, 0.1, 5.0);
    const DiagGaussian g = rng.gaussian(d, 5.0, 0.1, 5.0);
    const double err = std::abs(options.d_var(f, MixtureOfGaussians(g)) - mog::kl_gauss_gauss(f, g));
    ++r.cases;
    track_rel(r, err, kExactTol, case_label(i));
  }
  return r;
}

PropertyResult verify_product_gauss(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "product_gauss_identity";
  CaseRng rng(derive_seed(options.seed, 6, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t d = rng.index(1, 4);
    const DiagGaussian a = rng.gaussian(d, 3.0, 0.2, 3.0);
    const DiagGaussian b = rng.gaussian(d, 3.0, 0.2, 3.0);
    const mog::ScaledGaussian p = mog::product_gauss(a, b);
    ++r.cases;
    for (std::size_t k = 0; k < kPointsPerCase; ++k) {
      const std::vector<double> x = rng.point_near({&a, &b, &p.gaussian});
      track_rel(r, log_rel_error(a.log_density(x) + b.log_density(x), p.log_density(x)), kProductTol,
                case_label(i));
    }
  }
  return r;
}

PropertyResult verify_product_mog(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "product_mog_identity";
  CaseRng rng(derive_seed(options.seed, 7, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t d = rng.index(1, 4);
    const MixtureOfGaussians a = rng.mixture(d, rng.index(1, 3), 3.0, 0.3, 3.0);
    const MixtureOfGaussians b = rng.mixture(d, rng.index(1, 3), 3.0, 0.3, 3.0);
    const mog::ScaledMixture p = mog::product_mog(a, b);
    std::vector<const DiagGaussian*> around;
    for (const auto& c : p.mixture.components()) around.push_back(&c);
    ++r.cases;
    for (std::size_t k = 0; k < kPointsPerCase; ++k) {
      const std::vector<double> x = rng.point_near(around);
      track_rel(r, log_rel_error(a.log_density(x) + b.log_density(x), p.log_density(x)), kProductTol,
                case_label(i));
    }
  }
  return r;
}

PropertyResult verify_product_fold(const VerifyOptions& options, std::size_t cases, std::size_t factors) {
  PropertyResult r;
  r.name = "product_fold_identity";
  CaseRng rng(derive_seed(options.seed, 8, factors));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t d = rng.index(1, 3);
    std::vector<MixtureOfGaussians> fs;
    for (std::size_t t = 0; t < factors; ++t) fs.push_back(rng.mixture(d, rng.index(1, 3), 2.0, 0.5, 3.0));
    const mog::ScaledMixture p = mog::product_mog(std::span<const MixtureOfGaussians>(fs));
    std::vector<const DiagGaussian*> around;
    for (const auto& c : p.mixture.components()) around.push_back(&c);
    ++r.cases;
    for (std::size_t k = 0; k < kPointsPerCase; ++k) {
      const std::vector<double> x = rng.point_near(around);
      double direct = 0.0;
      for (const auto& f : fs) direct += f.log_density(x);
      track_rel(r, log_rel_error(direct, p.log_density(x)), kProductTol, case_label(i));
    }
  }
  return r;
}

PropertyResult verify_chebyshev(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "chebyshev_co_sorted";
  BoundTracker t{r};
  CaseRng rng(derive_seed(options.seed, 9, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t n = rng.index(2, 100);
    std::vector<double> a(n);
    std::vector<double> b(n);
    for (std::size_t k = 0; k < n; ++k) {
      a[k] = rng.uniform(-10.0, 10.0);
      b[k] = rng.uniform(-10.0, 10.0);
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (i % 2 == 1) {
      std::reverse(a.begin(), a.end());
      std::reverse(b.begin(), b.end());
    }
    t.check(mog::chebyshev_gap(a, b), 0.0, case_label(i));
  }
  return r;
}

PropertyResult verify_dvar_stability(const VerifyOptions& options, std::size_t cases) {
  PropertyResult r;
  r.name = "dvar_log_space_stability";
  CaseRng rng(derive_seed(options.seed, 10, 0));
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t d = rng.index(1, 4);
    const std::size_t k = rng.index(1, 5);
    const DiagGaussian f(std::vector<double>(d, 0.0), std::vector<double>(d, 1.0));
    std::vector<DiagGaussian> comps;
    for (std::size_t c = 0; c < k; ++c) {
      // Random direction scaled to a separation of up to 1e3.
      std::vector<double> dir(d);
      double norm = 0.0;
      for (double& x : dir) {
        x = rng.uniform(-1.0, 1.0);
        norm += x * x;
      }
      norm = std::sqrt(norm) + 1e-300;
      const double sep = c == 0 ? 1000.0 : rng.log_uniform(1.0, 1000.0);
      for (double& x : dir) x *= sep / norm;
      comps.emplace_back(std::move(dir), std::vector<double>(d, 1.0));
    }
    const MixtureOfGaussians g(std::vector<double>(k, 1.0 / static_cast<double>(k)), std::move(comps));
    const double v = options.d_var(f, g);
    ++r.cases;
    const bool ok = std::isfinite(v) && v >= 0.0;
    if (r.worst_label.empty() || v > r.worst) {
      r.worst = v;
      r.worst_label = case_label(i);
    }
    if (!ok && r.failures++ == 0) r.first_failure = case_label(i) + ": d_var = " + fmt(v);
  }
  return r;
}

VerifyReport run_verify(const VerifyOptions& options) {
  const std::size_t n = options.cases;
  VerifyReport report;
  report.properties.push_back(verify_kl_nonnegative(options, n));
  report.properties.push_back(verify_dvar_bound_quadrature(options, n));
  report.properties.push_back(verify_dvar_bound_monte_carlo(options, n / 5));
  report.properties.push_back(verify_dvar_exact_single_mode(options, n));
  report.properties.push_back(verify_product_gauss(options, n));
  report.properties.push_back(verify_product_mog(options, n));
  report.properties.push_back(verify_product_fold(options, n, 4));
  report.properties.push_back(verify_chebyshev(options, n));
  report.properties.push_back(verify_dvar_stability(options, n));
  return report;
}

}  // namespace vmed
