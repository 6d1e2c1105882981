#include <doctest.h>

#include "eigen_oracle.hpp"
#include "qsde/history.hpp"

using namespace qsde;

namespace {

std::vector<Mat> random_blocks(int r, std::size_t N, unsigned salt) {
  std::vector<Mat> b;
  for (int n = 0; n < r; ++n) {
    Mat m = oracle::test_matrix(N, N, salt + n);
    m *= 0.3;
    b.push_back(m);
  }
  return b;
}

}  // namespace

TEST_CASE("forward solve agrees with a dense Eigen solve") {
  HistorySystem s = assemble(SystemKind::dyson_padded, random_blocks(5, 3, 1), 2);
  CHECK(s.dim() == 3 * 8);
  Vec b(s.dim());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = std::sin(1.0 + i);
  Vec x = forward_solve(s, b);
  Eigen::VectorXd eb(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) eb(i) = b[i];
  Eigen::VectorXd ex = oracle::to_eigen(s.dense()).partialPivLu().solve(eb);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(x[i] == doctest::Approx(ex(i)).epsilon(1e-12));
}

TEST_CASE("inverse blocks agree with the dense inverse") {
  HistorySystem s = assemble(SystemKind::dyson_padded, random_blocks(4, 2, 9), 2);
  Eigen::MatrixXd inv = oracle::to_eigen(s.dense()).inverse();
  for (int n = 0; n <= 6; ++n)
    for (int np = 0; np <= 6; ++np) {
      Mat blk = inverse_block(s, n, np);
      CHECK(oracle::max_diff(blk, inv.block(2 * n, 2 * np, 2, 2)) < 1e-12);
    }
  CHECK_THROWS_AS(inverse_block(s, 7, 0), InvalidInput);
}

TEST_CASE("right-hand side assembly pads with zeros") {
  Vec b = assemble_rhs({1.0, 2.0}, {{3.0, 4.0}}, 2);
  CHECK(b == Vec{1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0});
  CHECK_THROWS_AS(assemble_rhs({1.0}, {{3.0, 4.0}}, 0), InvalidInput);
}

TEST_CASE("inverse-norm bound with exact propagators") {
  for (const char* name : {"const-diag", "rotating"}) {
    SdeProblem p = builtin_model(name);
    for (int r : {8, 32})
      for (int R : {0, 8}) {
        CAPTURE(name);
        CAPTURE(r);
        CAPTURE(R);
        TimeGrid g(p.T(), r);
        NormBoundReport rep = norm_bound_report(assemble(SystemKind::dyson, exact_phi_blocks(p, g), R), p, true);
        CHECK(rep.pass);
      }
  }
}

TEST_CASE("adversarial solver error has exactly the requested size") {
  HistorySystem s = assemble(SystemKind::dyson, random_blocks(3, 2, 4), 0);
  Vec b(s.dim(), 1.0);
  QlssModel q;
  q.mode = QlssMode::adversarial;
  q.inv_error = 0.01;
  q.stream = PcgStream(3, 4);
  q.index = 2;
  HistoryState st = solve(s, b, q);
  Vec x = forward_solve(s, b);
  axpy(-1.0, st.raw, x);
  CHECK(norm2(x) == doctest::Approx(0.01 * norm2(b)).epsilon(1e-12));
  q.mode = QlssMode::honest;
  CHECK(solve(s, b, q).raw == forward_solve(s, b));
  CHECK_THROWS_AS(parse_qlss_mode("lazy"), ConfigError);
}

TEST_CASE("emulated history states meet the pathwise bound") {
  for (bool padded : {false, true})
    for (QlssMode mode : {QlssMode::honest, QlssMode::adversarial}) {
      CAPTURE(padded);
      HistoryOptions o;
      o.eps = 0.25;
      o.padded = padded;
      o.N_s = 20;
      HistoryContext ctx(builtin_model("ou"), o);
      for (std::uint64_t i = 1; i <= 5; ++i) {
        HistoryCheck c = ctx.verify(i, mode);
        CHECK(c.pass());
        CHECK(c.amplitude_mass <= 1.0 + 1e-12);
      }
      if (padded) CHECK(ctx.plan().R == 4);
    }
}

TEST_CASE("history plan constants") {
  HistoryOptions o;
  o.eps = 0.1;
  HistoryContext ctx(builtin_model("ou"), o);
  const HistoryPlan& pl = ctx.plan();
  CHECK(pl.r_c == 4);
  CHECK(pl.prefactor == doctest::Approx(1.0 / (8.0 * 4 * pl.U_B)));
  CHECK(pl.U_B == doctest::Approx(std::sqrt(1.0 + 4.0 * pl.U_SN * pl.U_SN)));
  CHECK(pl.K_c >= 7);
}

TEST_CASE("history construction refuses rank-deficient noise") {
  CHECK_THROWS_AS(HistoryContext(builtin_model("ou-degenerate"), HistoryOptions{}), BoundViolation);
}

TEST_CASE("perturbed square roots still meet the bound") {
  HistoryOptions o;
  o.eps = 0.1;
  o.perturb_sqrt = true;
  HistoryContext ctx(builtin_model("const-diag"), o);
  HistoryCheck c = ctx.verify(1, QlssMode::adversarial);
  CHECK(c.delta_ok);
  CHECK(c.pass());
}
