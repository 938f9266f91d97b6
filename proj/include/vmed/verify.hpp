#pragma once

// Randomized property checks of the mixture mathematics against independent
// oracles: the D_var upper bound (quadrature in 1-D, Monte Carlo in 3-D),
// exactness at K = 1, the Gaussian and mixture product identities, the
// Chebyshev sum inequality and log-space stability of D_var.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vmed/mog_math.hpp"

namespace vmed {

using DvarFunction = std::function<double(const mog::DiagGaussian&, const mog::MixtureOfGaussians&)>;

struct VerifyOptions {
  std::uint64_t seed = 1;
  std::size_t cases = 1000;
  // Monte-Carlo checks run cases / 5 pairs with this many samples each.
  std::size_t mc_samples = 1000000;
  std::size_t threads = 1;
  // Replaceable so a deliberately broken implementation can be fed through.
  DvarFunction d_var = [](const mog::DiagGaussian& f, const mog::MixtureOfGaussians& g) { return mog::d_var(f, g); };
};

struct PropertyResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  // Smallest slack for inequalities, largest relative error for identities.
  double worst = 0.0;
  std::string worst_label;
  std::string first_failure;

  bool passed() const { return failures == 0; }
};

struct VerifyReport {
  std::vector<PropertyResult> properties;

  bool passed() const;
  std::string format() const;
};

VerifyReport run_verify(const VerifyOptions& options);

// Single properties, exposed for the acceptance suite.
PropertyResult verify_kl_nonnegative(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_dvar_bound_quadrature(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_dvar_bound_monte_carlo(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_dvar_exact_single_mode(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_product_gauss(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_product_mog(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_product_fold(const VerifyOptions& options, std::size_t cases, std::size_t factors);
PropertyResult verify_chebyshev(const VerifyOptions& options, std::size_t cases);
PropertyResult verify_dvar_stability(const VerifyOptions& options, std::size_t cases);

}  // namespace vmed
