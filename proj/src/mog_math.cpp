#include "vmed/mog_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace vmed::mog {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_same_dim(const char* op, std::size_t a, std::size_t b) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
  }
}

double log_sum_exp(std::span<const double> xs) {
  double mx = kNegInf;
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double total = 0.0;
  for (double x : xs) total += std::exp(x - mx);
  return mx + std::log(total);
}

double safe_log(double w) { return w > 0.0 ? std::log(w) : kNegInf; }

struct SimpsonPanel {
  double a, b, fa, fm, fb, whole;
};

template <class F>
double adaptive_simpson(const F& f, const SimpsonPanel& p, double tol, int depth) {
  const double m = 0.5 * (p.a + p.b);
  const double lm = 0.5 * (p.a + m);
  const double rm = 0.5 * (m + p.b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
  const double right = (p.b - m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
  const double delta = left + right - p.whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_simpson(f, {p.a, m, p.fa, flm, p.fm, left}, 0.5 * tol, depth - 1) +
         adaptive_simpson(f, {m, p.b, p.fm, frm, p.fb, right}, 0.5 * tol, depth - 1);
}

template <class F>
double integrate(const F& f, double a, double b, double tol) {
  const double fa = f(a);
  const double fb = f(b);
  const double fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson(f, {a, b, fa, fm, fb, whole}, tol, 50);
}

}  // namespace

// ---- types -----------------------------------------------------------------

DiagGaussian::DiagGaussian(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), stddev_(std::move(stddev)) {
  if (mean_.empty()) throw std::invalid_argument("DiagGaussian: dimension must be >= 1");
  check_same_dim("DiagGaussian", mean_.size(), stddev_.size());
  for (double s : stddev_) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("DiagGaussian: stddev must be finite and strictly positive");
    }
  }
}

double DiagGaussian::log_density(std::span<const double> x) const {
  check_same_dim("log_density", x.size(), dim());
  double total = 0.0;
  for (std::size_t j = 0; j < dim(); ++j) {
    const double z = (x[j] - mean_[j]) / stddev_[j];
    total += -0.5 * kLog2Pi - std::log(stddev_[j]) - 0.5 * z * z;
  }
  return total;
}

MixtureOfGaussians::MixtureOfGaussians(std::vector<double> weights, std::vector<DiagGaussian> components)
    : weights_(std::move(weights)), components_(std::move(components)) {
  if (components_.empty()) throw std::invalid_argument("MixtureOfGaussians: needs at least one component");
  check_same_dim("MixtureOfGaussians", weights_.size(), components_.size());
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw std::invalid_argument("MixtureOfGaussians: weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("MixtureOfGaussians: weights sum to " + std::to_string(total) + ", not 1");
  }
  for (const auto& c : components_) check_same_dim("MixtureOfGaussians", c.dim(), components_.front().dim());
}

MixtureOfGaussians::MixtureOfGaussians(DiagGaussian component)
    : MixtureOfGaussians({1.0}, {std::move(component)}) {}

double MixtureOfGaussians::log_density(std::span<const double> x) const {
  std::vector<double> terms(size());
  for (std::size_t i = 0; i < size(); ++i) terms[i] = safe_log(weights_[i]) + components_[i].log_density(x);
  return log_sum_exp(terms);
}

double ScaledGaussian::scale() const { return std::exp(log_scale); }

double ScaledGaussian::log_density(std::span<const double> x) const {
  return log_scale + gaussian.log_density(x);
}

double ScaledMixture::scale() const { return std::exp(log_scale); }

double ScaledMixture::log_density(std::span<const double> x) const {
  return log_scale + mixture.log_density(x);
}

// ---- divergences -----------------------------------------------------------

double kl_gauss_gauss(const DiagGaussian& f, const DiagGaussian& g) {
  check_same_dim("kl_gauss_gauss", f.dim(), g.dim());
  double total = 0.0;
  for (std::size_t j = 0; j < f.dim(); ++j) {
    const double sf = f.stddev()[j];
    const double sg = g.stddev()[j];
    const double dm = f.mean()[j] - g.mean()[j];
    total += std::log(sg / sf) + (sf * sf + dm * dm) / (2.0 * sg * sg) - 0.5;
  }
  // Rounding can leave -1e-17 for identical inputs.
  return std::max(total, 0.0);
}

double d_var(const DiagGaussian& f, const MixtureOfGaussians& g) {
  check_same_dim("d_var", f.dim(), g.dim());
  std::vector<double> terms(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    terms[i] = safe_log(g.weights()[i]) - kl_gauss_gauss(f, g.components()[i]);
  }
  return -log_sum_exp(terms);
}

McEstimate mc_kl_estimate(const DiagGaussian& f, const MixtureOfGaussians& g, std::size_t n_samples,
                          std::uint64_t seed) {
  if (n_samples == 0) throw std::invalid_argument("mc_kl_estimate: n_samples must be >= 1");
  check_same_dim("mc_kl_estimate", f.dim(), g.dim());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> x(f.dim());
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t n = 1; n <= n_samples; ++n) {
    for (std::size_t j = 0; j < f.dim(); ++j) x[j] = f.mean()[j] + f.stddev()[j] * normal(rng);
    const double v = f.log_density(x) - g.log_density(x);
    const double delta = v - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (v - mean);
  }
  const double n = static_cast<double>(n_samples);
  const double variance = n_samples > 1 ? m2 / (n - 1.0) : 0.0;
  return {mean, std::sqrt(variance / n)};
}

double quadrature_kl(const DiagGaussian& f, const MixtureOfGaussians& g) {
  if (f.dim() != 1 || g.dim() != 1) throw std::invalid_argument("quadrature_kl: only defined for d = 1");
  const double fm = f.mean()[0];
  const double fs = f.stddev()[0];
  double lo = fm - 12.0 * fs;
  double hi = fm + 12.0 * fs;
  for (const auto& c : g.components()) {
    lo = std::min(lo, c.mean()[0] - 12.0 * c.stddev()[0]);
    hi = std::max(hi, c.mean()[0] + 12.0 * c.stddev()[0]);
  }
  // Panel edges at every sigma of f so the adaptive rule always sees its mass.
  std::vector<double> edges{lo, hi};
  for (int k = -12; k <= 12; ++k) edges.push_back(fm + k * fs);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  const auto integrand = [&](double x) {
    const double lf = f.log_density(std::span<const double>(&x, 1));
    if (lf < -740.0) return 0.0;
    const double lg = g.log_density(std::span<const double>(&x, 1));
    return std::exp(lf) * (lf - lg);
  };
  const double tol = 1e-10 / static_cast<double>(edges.size());
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) total += integrate(integrand, edges[i], edges[i + 1], tol);
  return total;
}

// ---- products --------------------------------------------------------------

ScaledGaussian product_gauss(const DiagGaussian& a, const DiagGaussian& b) {
  check_same_dim("product_gauss", a.dim(), b.dim());
  const std::size_t d = a.dim();
  std::vector<double> mean(d);
  std::vector<double> stddev(d);
  double log_scale = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double v1 = a.stddev()[j] * a.stddev()[j];
    const double v2 = b.stddev()[j] * b.stddev()[j];
    const double vs = v1 + v2;
    const double dm = a.mean()[j] - b.mean()[j];
    // Sigma_c = (Sigma_1^-1 + Sigma_2^-1)^-1, per axis.
    stddev[j] = std::sqrt(v1 * v2 / vs);
    mean[j] = (a.mean()[j] * v2 + b.mean()[j] * v1) / vs;
    log_scale += -0.5 * (kLog2Pi + std::log(vs)) - 0.5 * dm * dm / vs;
  }
  return {log_scale, DiagGaussian(std::move(mean), std::move(stddev))};
}

ScaledMixture product_mog(const MixtureOfGaussians& a, const MixtureOfGaussians& b) {
  check_same_dim("product_mog", a.dim(), b.dim());
  std::vector<double> log_weights;
  std::vector<DiagGaussian> components;
  log_weights.reserve(a.size() * b.size());
  components.reserve(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      ScaledGaussian p = product_gauss(a.components()[i], b.components()[j]);
      log_weights.push_back(safe_log(a.weights()[i]) + safe_log(b.weights()[j]) + p.log_scale);
      components.push_back(std::move(p.gaussian));
    }
  }
  const double log_total = log_sum_exp(log_weights);
  if (!std::isfinite(log_total)) throw std::domain_error("product_mog: product density vanishes everywhere");
  std::vector<double> weights(log_weights.size());
  for (std::size_t k = 0; k < weights.size(); ++k) weights[k] = std::exp(log_weights[k] - log_total);
  return {log_total, MixtureOfGaussians(std::move(weights), std::move(components))};
}

ScaledMixture product_mog(std::span<const MixtureOfGaussians> factors) {
  if (factors.empty()) throw std::invalid_argument("product_mog: no factors");
  ScaledMixture acc{0.0, factors.front()};
  for (std::size_t t = 1; t < factors.size(); ++t) {
    ScaledMixture next = product_mog(acc.mixture, factors[t]);
    acc = {acc.log_scale + next.log_scale, std::move(next.mixture)};
  }
  return acc;
}

// ---- misc ------------------------------------------------------------------

double chebyshev_gap(std::span<const double> a, std::span<const double> b) {
  check_same_dim("chebyshev_gap", a.size(), b.size());
  if (a.empty()) return 0.0;
  const double n = static_cast<double>(a.size());
  double sab = 0.0;
  double sa = 0.0;
  double sb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += a[k] * b[k];
    sa += a[k];
    sb += b[k];
  }
  return sab / n - (sa / n) * (sb / n);
}

std::vector<double> reparam_sample(const DiagGaussian& q, std::span<const double> eps) {
  check_same_dim("reparam_sample", q.dim(), eps.size());
  std::vector<double> z(q.dim());
  for (std::size_t j = 0; j < q.dim(); ++j) z[j] = q.mean()[j] + q.stddev()[j] * eps[j];
  return z;
}

// ---- tape-aware forms ------------------------------------------------------

DiagGaussian GaussianTensor::value() const { return DiagGaussian(mean.to_vector(), stddev.to_vector()); }

MixtureOfGaussians MixtureTensor::value() const {
  std::vector<DiagGaussian> comps;
  comps.reserve(components.size());
  for (const auto& c : components) comps.push_back(c.value());
  return MixtureOfGaussians(weights.to_vector(), std::move(comps));
}

ad::Tensor kl_gauss_gauss(const GaussianTensor& f, const GaussianTensor& g) {
  check_same_dim("kl_gauss_gauss", f.dim(), g.dim());
  const ad::Tensor dm = f.mean - g.mean;
  const ad::Tensor quad = (f.stddev * f.stddev + dm * dm) / (g.stddev * g.stddev);
  return ad::sum(ad::log(g.stddev) - ad::log(f.stddev) + 0.5 * quad - 0.5);
}

ad::Tensor d_var(const GaussianTensor& f, const MixtureTensor& g) {
  if (g.components.empty()) throw std::invalid_argument("d_var: empty mixture");
  check_same_dim("d_var", g.weights.size(), g.components.size());
  std::vector<ad::Tensor> kls;
  kls.reserve(g.size());
  for (const auto& c : g.components) kls.push_back(kl_gauss_gauss(f, c));
  return -ad::logsumexp(ad::log(g.weights) - ad::concat(kls));
}

ad::Tensor reparam_sample(const GaussianTensor& q, const ad::Tensor& eps) {
  check_same_dim("reparam_sample", q.dim(), eps.size());
  return q.mean + q.stddev * eps;
}

}  // namespace vmed::mog
