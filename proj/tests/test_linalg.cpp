#include <doctest.h>

#include <cmath>

#include "eigen_oracle.hpp"
#include "qsde/linalg.hpp"

using namespace qsde;
using oracle::test_matrix;
using oracle::to_eigen;

TEST_CASE("matmul agrees with Eigen and with its serial reference") {
  Mat a = test_matrix(37, 23, 1), b = test_matrix(23, 41, 2);
  Mat c = matmul(a, b);
  CHECK(oracle::max_diff(c, to_eigen(a) * to_eigen(b)) < 1e-13);
  Mat s = matmul_serial(a, b);
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.cols(); ++j) REQUIRE(c(i, j) == s(i, j));
  CHECK_THROWS_AS(matmul(a, a), InvalidInput);
}

TEST_CASE("matvec, transpose product, dot and norm") {
  Mat a = test_matrix(5, 3, 3);
  Vec x{0.5, -1.0, 2.0}, y{1.0, 2.0, 3.0, 4.0, 5.0};
  Eigen::VectorXd ex(3), ey(5);
  for (int i = 0; i < 3; ++i) ex(i) = x[i];
  for (int i = 0; i < 5; ++i) ey(i) = y[i];
  Vec ax = matvec(a, x), aty = matvec_transposed(a, y);
  Eigen::VectorXd eax = to_eigen(a) * ex, eaty = to_eigen(a).transpose() * ey;
  for (int i = 0; i < 5; ++i) CHECK(ax[i] == doctest::Approx(eax(i)).epsilon(1e-14));
  for (int i = 0; i < 3; ++i) CHECK(aty[i] == doctest::Approx(eaty(i)).epsilon(1e-14));
  CHECK(norm2(y) == doctest::Approx(ey.norm()));
  Vec z = y;
  axpy(2.0, y, z);
  CHECK(z[4] == doctest::Approx(15.0));
}

TEST_CASE("symmetric eigendecomposition against Eigen") {
  Mat g = test_matrix(7, 7, 4);
  Mat s = g + g.transpose();
  SymEig e = sym_eig(s);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(s));
  for (int i = 0; i < 7; ++i) CHECK(e.values[i] == doctest::Approx(es.eigenvalues()(i)).epsilon(1e-12));
  // reconstruction V diag V^T
  Mat v = e.vectors;
  Mat rec = v * Mat::diag(e.values) * v.transpose();
  CHECK(oracle::max_diff(rec, to_eigen(s)) < 1e-12);
}

TEST_CASE("singular values, spectral norm and condition number against Eigen") {
  Mat a = test_matrix(6, 4, 5);
  Vec sv = singular_values(a);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a));
  REQUIRE(sv.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(sv[i] == doctest::Approx(svd.singularValues()(i)).epsilon(1e-12));
  Mat sq = test_matrix(5, 5, 6);
  Eigen::JacobiSVD<Eigen::MatrixXd> s2(to_eigen(sq));
  CHECK(spectral_norm(sq) == doctest::Approx(s2.singularValues()(0)).epsilon(1e-12));
  CHECK(condition_number(sq) == doctest::Approx(s2.singularValues()(0) / s2.singularValues()(4)).epsilon(1e-10));
}

TEST_CASE("logarithmic norm") {
  Mat a{{-1.0, 2.0}, {0.0, -3.0}};
  Eigen::MatrixXd e = to_eigen(a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (e + e.transpose()));
  CHECK(log_norm(a) == doctest::Approx(es.eigenvalues()(1)).epsilon(1e-13));
}

TEST_CASE("matrix exponential") {
  SUBCASE("rotation generator gives a rotation") {
    const double w = 1.3;
    Mat g{{0.0, w}, {-w, 0.0}};
    Mat e = matrix_exp(g);
    CHECK(e(0, 0) == doctest::Approx(std::cos(w)).epsilon(1e-15));
    CHECK(e(0, 1) == doctest::Approx(std::sin(w)).epsilon(1e-15));
  }
  SUBCASE("diagonal and large norm") {
    Mat d = Mat::diag({-30.0, 2.0});
    Mat e = matrix_exp(d);
    CHECK(e(0, 0) == doctest::Approx(std::exp(-30.0)).epsilon(1e-12));
    CHECK(e(1, 1) == doctest::Approx(std::exp(2.0)).epsilon(1e-14));
  }
  SUBCASE("general matrix against a long Taylor sum with squaring") {
    Mat a = test_matrix(4, 4, 7);
    a *= 2.0;
    // exp(A) = exp(A/64)^64 with a 30-term Taylor series for the small argument
    Eigen::MatrixXd s = to_eigen(a) / 64.0, term = Eigen::MatrixXd::Identity(4, 4), sum = term;
    for (int k = 1; k < 30; ++k) {
      term = term * s / k;
      sum += term;
    }
    for (int k = 0; k < 6; ++k) sum = sum * sum;
    CHECK(oracle::max_diff(matrix_exp(a), sum) < 1e-11 * sum.norm());
  }
}

TEST_CASE("square root of a PSD matrix") {
  Mat g = test_matrix(5, 5, 8);
  Mat s = g * g.transpose();
  Mat r = sqrt_psd(s, 1e-12);
  CHECK(oracle::max_diff(r * r, to_eigen(s)) < 1e-12);
  CHECK(oracle::max_diff(r, to_eigen(r).transpose()) < 1e-14);
  Mat bad = Mat::diag({1.0, -0.5});
  CHECK_THROWS_AS(sqrt_psd(bad, 1e-12), NotPsd);
}

TEST_CASE("LU solve against Eigen") {
  Mat a = test_matrix(6, 6, 9) + 6.0 * Mat::identity(6);
  Mat b = test_matrix(6, 2, 10);
  Mat x = lu_solve(a, b);
  Eigen::MatrixXd ex = to_eigen(a).partialPivLu().solve(to_eigen(b));
  CHECK(oracle::max_diff(x, ex) < 1e-13);
  Mat sing{{1.0, 2.0}, {2.0, 4.0}};
  CHECK_THROWS_AS(lu_solve(sing, Mat::identity(2)), Singular);
}

TEST_CASE("blocks and element-wise helpers") {
  Mat a = test_matrix(4, 4, 11);
  Mat b = a.block(1, 1, 2, 3);
  CHECK(b(0, 0) == a(1, 1));
  Mat z(4, 4);
  z.set_block(2, 1, b.block(0, 0, 2, 2));
  CHECK(z(3, 2) == a(2, 2));
  CHECK(a.frobenius() == doctest::Approx(to_eigen(a).norm()));
  Mat nan{{std::nan(""), 0.0}};
  CHECK_THROWS_AS(require_finite(nan, "x"), InvalidInput);
}
