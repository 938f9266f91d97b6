#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vmed/verify.hpp"

using namespace vmed;

namespace {

VerifyOptions small_options() {
  VerifyOptions o;
  o.cases = 100;
  o.mc_samples = 20000;
  return o;
}

}  // namespace

TEST_CASE("a small verification run passes every property") {
  const VerifyReport report = run_verify(small_options());
  INFO(report.format());
  CHECK(report.passed());
  CHECK(report.properties.size() >= 9);
  for (const auto& p : report.properties) {
    CHECK(p.cases > 0);
    CHECK(p.failures == 0);
  }
  const std::string text = report.format();
  CHECK(text.find("FAIL") == std::string::npos);
}

TEST_CASE("verification is deterministic and thread independent") {
  VerifyOptions o = small_options();
  const std::string serial = run_verify(o).format();
  CHECK(run_verify(o).format() == serial);
  o.threads = 3;
  CHECK(run_verify(o).format() == serial);
}

TEST_CASE("an offset D_var is caught") {
  VerifyOptions o = small_options();
  o.d_var = [](const mog::DiagGaussian& f, const mog::MixtureOfGaussians& g) { return mog::d_var(f, g) - 1.0; };
  const VerifyReport report = run_verify(o);
  CHECK_FALSE(report.passed());
  CHECK_FALSE(verify_dvar_exact_single_mode(o, 50).passed());
  CHECK_FALSE(verify_dvar_bound_quadrature(o, 50).passed());
  const PropertyResult r = verify_dvar_exact_single_mode(o, 50);
  CHECK(r.failures == 50);
  CHECK_FALSE(r.first_failure.empty());
  CHECK(report.format().find("FAIL") != std::string::npos);
}

TEST_CASE("product fold over several factors") {
  const PropertyResult r = verify_product_fold(small_options(), 20, 4);
  CHECK(r.passed());
  CHECK(r.cases == 20);
}
