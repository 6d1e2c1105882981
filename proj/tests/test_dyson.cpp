#include <doctest.h>

#include <cmath>

#include "eigen_oracle.hpp"
#include "qsde/dyson.hpp"

using namespace qsde;

TEST_CASE("block-encoding product and average budgets") {
  BlockEncodingSpec a{Mat{{0.5}}, 2.0, 1, 0.01}, b{Mat{{0.25}}, 3.0, 2, 0.02};
  BlockEncodingSpec c = be_product(a, b);
  CHECK(c.alpha == 6.0);
  CHECK(c.ancillas == 3);
  CHECK(c.epsilon == doctest::Approx(2.0 * 0.02 + 3.0 * 0.01 + 0.0002));
  CHECK(c.target(0, 0) == 0.125);
  BlockEncodingSpec avg = be_lcu_average({a, b, a}, 0.5);
  CHECK(avg.target(0, 0) == doctest::Approx(0.625));
  CHECK(avg.ancillas == 2 + 2);
  CHECK(avg.epsilon == doctest::Approx(0.5 * (0.01 + 0.02 + 0.01)));
}

TEST_CASE("parameter choice for the propagator truncation") {
  SdeProblem p = builtin_model("timedep");
  KrmChoice c = choose_krm_phi(p, 1e-4);
  CHECK(c.K == std::max(static_cast<int>(std::ceil(std::log(3e4))), 7));
  CHECK(c.r == static_cast<int>(std::ceil(p.bounds().alpha_A * p.T())));
  CHECK(c.M == std::ceil(4.0 * 0.2 / (1.2 * 1.2 * 1e-4)));
  CHECK(choose_krm_phi(p, 0.5).K == 7);
  CHECK_THROWS_AS(choose_krm_phi(p, 0.0), InvalidInput);
}

TEST_CASE("autonomous truncation is a truncated exponential") {
  SdeProblem p = builtin_model("rotating");
  TimeGrid g(1.0, 4, 8);
  Mat phi = truncated_dyson(p, g, 30, 1, 3);
  Mat ex = exact_phi(p, g.s(1, 3), g.t(2));
  CHECK(spectral_norm(phi - ex) < 1e-14);
  Mat low = truncated_dyson(p, g, 1, 1, 3);
  Mat lin = Mat::identity(4) + (g.t(2) - g.s(1, 3)) * p.A(0.0);
  CHECK(spectral_norm(low - lin) < 1e-15);
}

TEST_CASE("time-dependent truncation converges to the closed form") {
  SdeProblem p = builtin_model("timedep");
  TimeGrid g(1.0, 2, 64);
  const double s = g.s(0, 5), t = g.t(1);
  const double exact = std::exp(-(t - s) - 0.1 * (t * t - s * s));
  const double e1 = std::fabs(truncated_dyson(p, g, 12, 0, 5)(0, 0) - exact);
  CHECK(e1 < 2.0 * 0.2 * (t - s) * (t - s) / 64);
}

TEST_CASE("measured truncation error meets its target") {
  for (const char* name : {"const-diag", "timedep", "rotating"}) {
    CAPTURE(name);
    ErrorCheckReport r = dyson_error_bound_check(builtin_model(name), 1e-2);
    CHECK(r.pass);
  }
  // dropping orders makes the check fail
  ErrorCheckReport bad = dyson_error_bound_check(builtin_model("rotating"), 1e-4, -6);
  CHECK_FALSE(bad.pass);
}

TEST_CASE("parallel blocks equal the serial reference") {
  SdeProblem p = builtin_model("timedep");
  TimeGrid g(1.0, 3, 16);
  DysonBlocks a = dyson_blocks(p, g, 9, false), b = dyson_blocks_serial(p, g, 9, false);
  REQUIRE(a.phi.size() == b.phi.size());
  for (std::size_t k = 0; k < a.phi.size(); ++k) REQUIRE(a.phi[k](0, 0) == b.phi[k](0, 0));
  DysonBlocks c = dyson_blocks(p, g, 9, true);
  CHECK(c.at(2, 0)(0, 0) == a.at(2, 0)(0, 0));
}

TEST_CASE("approximate covariance meets its target and is contained") {
  for (const char* name : {"const-diag", "timedep", "rotating"}) {
    CAPTURE(name);
    SdeProblem p = builtin_model(name);
    ErrorCheckReport r = covariance_error_check(p, 1e-1);
    CHECK(r.pass);
    const int rc = static_cast<int>(std::ceil(4.0 * p.bounds().kappa_BBT * p.bounds().alpha_A * p.T() - 1e-9));
    TimeGrid g(p.T(), rc);
    for (int n = 0; n < rc; ++n) CHECK(covariance_containment(exact_sigma(p, g.t(n), g.t(n + 1)), p, g.dt).pass);
  }
}

TEST_CASE("covariance parameter choice rejects a too-coarse grid") {
  SdeProblem p = builtin_model("rotating");
  CHECK_THROWS_AS(choose_krm_sigma(p, 0.1, 1), InvalidInput);
  KrmChoice c = choose_krm_sigma(p, 0.1);
  CHECK(c.K == std::max(static_cast<int>(std::ceil(std::log(180.0))), 7));
}

TEST_CASE("square root with budget and the noise samples") {
  SdeProblem p = builtin_model("const-diag");
  TimeGrid g(1.0, 8, 64);
  DysonBlocks bl = dyson_blocks(p, g, 12, false);
  CovBuildOptions o;
  o.sqrt_eps = 1e-3;
  CovApprox cov = build_cov_approx(p, bl, o);
  for (int n = 0; n < 8; ++n) {
    Mat s2 = cov.s_tilde[n] * cov.s_tilde[n];
    CHECK(spectral_norm(s2 - cov.sigma_tilde[n]) < 1e-14);
  }
  PcgStream st(5, 6);
  Vec d = noise_sample(cov, st, 3, 2, ClipBound{2.0});
  Vec z = noise_vector(st, 3, 2, 2, 8);
  for (double& v : z) v = clip(v, ClipBound{2.0});
  Vec ref = matvec(cov.s_tilde[2], z);
  CHECK(d[0] == ref[0]);
  CHECK(d[1] == ref[1]);

  CovBuildOptions pert = o;
  pert.perturb_sqrt = true;
  CovApprox cp = build_cov_approx(p, bl, pert);
  const double budget = o.sqrt_eps * p.bounds().sigma * std::sqrt(g.dt);
  CHECK(spectral_norm(cp.s_tilde[0] - cov.s_tilde[0]) == doctest::Approx(budget).epsilon(1e-9));

  Mat tiny = Mat::diag({1e-9, 1e-9});
  CHECK_THROWS_AS(sqrt_with_budget(tiny, p, g, 1e-3), BoundViolation);
  CHECK_THROWS_AS(build_cov_approx(builtin_model("ou-degenerate"), bl, o), BoundViolation);
}
