#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "qsde/errors.hpp"

namespace qsde {

using Vec = std::vector<double>;

/// Dense row-major real matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0);
  Mat(std::initializer_list<std::initializer_list<double>> rows);

  static Mat identity(std::size_t n);
  static Mat diag(const Vec& d);

  std::size_t rows() const { return r_; }
  std::size_t cols() const { return c_; }
  bool empty() const { return a_.empty(); }
  bool square() const { return r_ == c_; }

  double& operator()(std::size_t i, std::size_t j) { return a_[i * c_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a_[i * c_ + j]; }

  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }

  Mat transpose() const;
  bool is_finite() const;
  double frobenius() const;
  double max_abs() const;

  Mat& operator+=(const Mat& o);
  Mat& operator-=(const Mat& o);
  Mat& operator*=(double s);

  /// Copies the block with top-left corner (i0, j0) and the given size.
  Mat block(std::size_t i0, std::size_t j0, std::size_t nr, std::size_t nc) const;
  void set_block(std::size_t i0, std::size_t j0, const Mat& b);

 private:
  std::size_t r_ = 0, c_ = 0;
  std::vector<double> a_;
};

Mat operator+(Mat a, const Mat& b);
Mat operator-(Mat a, const Mat& b);
Mat operator*(double s, Mat a);
Mat operator*(const Mat& a, const Mat& b);

/// C = A B. The parallel variant splits rows across OpenMP threads.
Mat matmul(const Mat& a, const Mat& b);
/// Serial reference for matmul; results are bitwise identical.
Mat matmul_serial(const Mat& a, const Mat& b);

Vec matvec(const Mat& a, const Vec& x);
Vec matvec_transposed(const Mat& a, const Vec& x);

double dot(const Vec& a, const Vec& b);
double norm2(const Vec& a);
void axpy(double alpha, const Vec& x, Vec& y);

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues ascend; eigenvectors are the columns of `vectors`.
struct SymEig {
  Vec values;
  Mat vectors;
};
SymEig sym_eig(const Mat& m);

/// Singular values in descending order (one-sided Jacobi).
Vec singular_values(const Mat& m);

double spectral_norm(const Mat& m);
/// mu(A) = lambda_max((A + A^T) / 2).
double log_norm(const Mat& m);
/// exp(m) by scaling and squaring around a degree-13 Pade approximant.
Mat matrix_exp(const Mat& m);
/// Symmetric square root of a positive semidefinite matrix.
Mat sqrt_psd(const Mat& m, double tol);
double condition_number(const Mat& m);

/// Solves A X = B with partial pivoting.
Mat lu_solve(const Mat& a, const Mat& b);

void require_finite(const Mat& m, const char* what);

}  // namespace qsde
