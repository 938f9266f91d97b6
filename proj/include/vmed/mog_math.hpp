#pragma once

// Diagonal Gaussians, mixtures of them, the variational KL approximation
// D_var(f||g) = -log sum_i pi_i exp(-KL(f||g_i)), closed-form products of
// Gaussian densities, and the numerical oracles that check them.
//
// Two flavours are provided: plain double values for analysis/verification,
// and tensor-valued forms that record on the autodiff tape for training.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vmed/autodiff.hpp"

namespace vmed::mog {

class DiagGaussian {
 public:
  DiagGaussian(std::vector<double> mean, std::vector<double> stddev);

  std::size_t dim() const { return mean_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return stddev_; }
  double log_density(std::span<const double> x) const;

 private:
  std::vector<double> mean_;
  std::vector<double> stddev_;
};

class MixtureOfGaussians {
 public:
  MixtureOfGaussians(std::vector<double> weights, std::vector<DiagGaussian> components);
  // Single-mode mixture.
  explicit MixtureOfGaussians(DiagGaussian component);

  std::size_t size() const { return weights_.size(); }
  std::size_t dim() const { return components_.front().dim(); }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<DiagGaussian>& components() const { return components_; }
  double log_density(std::span<const double> x) const;

 private:
  std::vector<double> weights_;
  std::vector<DiagGaussian> components_;
};

// c * N(x; mu, sigma^2). The scale is kept in log space so products of many
// well-separated densities do not underflow.
struct ScaledGaussian {
  double log_scale;
  DiagGaussian gaussian;

  double scale() const;
  double log_density(std::span<const double> x) const;
};

struct ScaledMixture {
  double log_scale;
  MixtureOfGaussians mixture;

  double scale() const;
  double log_density(std::span<const double> x) const;
};

double kl_gauss_gauss(const DiagGaussian& f, const DiagGaussian& g);

double d_var(const DiagGaussian& f, const MixtureOfGaussians& g);

struct McEstimate {
  double estimate;
  double std_error;
};

// Monte-Carlo estimate of KL(f || g) = E_f[log f - log g].
McEstimate mc_kl_estimate(const DiagGaussian& f, const MixtureOfGaussians& g, std::size_t n_samples,
                          std::uint64_t seed);

// Deterministic 1-D KL(f || g) by adaptive Simpson over the union of the
// +-12 sigma ranges of f and every component of g.
double quadrature_kl(const DiagGaussian& f, const MixtureOfGaussians& g);

ScaledGaussian product_gauss(const DiagGaussian& a, const DiagGaussian& b);
ScaledMixture product_mog(const MixtureOfGaussians& a, const MixtureOfGaussians& b);
// Left fold of product_mog over one or more mixtures.
ScaledMixture product_mog(std::span<const MixtureOfGaussians> factors);

// (1/n) sum a_k b_k - (1/n sum a_k)(1/n sum b_k); nonnegative when a and b
// are sorted in the same order.
double chebyshev_gap(std::span<const double> a, std::span<const double> b);

std::vector<double> reparam_sample(const DiagGaussian& q, std::span<const double> eps);

// ---- tape-aware forms ------------------------------------------------------

struct GaussianTensor {
  ad::Tensor mean;
  ad::Tensor stddev;

  std::size_t dim() const { return mean.size(); }
  DiagGaussian value() const;
};

struct MixtureTensor {
  ad::Tensor weights;
  std::vector<GaussianTensor> components;

  std::size_t size() const { return components.size(); }
  MixtureOfGaussians value() const;
};

ad::Tensor kl_gauss_gauss(const GaussianTensor& f, const GaussianTensor& g);
ad::Tensor d_var(const GaussianTensor& f, const MixtureTensor& g);
ad::Tensor reparam_sample(const GaussianTensor& q, const ad::Tensor& eps);

}  // namespace vmed::mog
