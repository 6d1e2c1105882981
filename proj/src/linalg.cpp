#include "qsde/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace qsde {

Mat::Mat(std::size_t rows, std::size_t cols, double fill) : r_(rows), c_(cols) {
  if (rows == 0 || cols == 0) throw InvalidInput("matrix dimensions must be positive");
  a_.assign(rows * cols, fill);
}

Mat::Mat(std::initializer_list<std::initializer_list<double>> rows) {
  r_ = rows.size();
  c_ = r_ ? rows.begin()->size() : 0;
  if (r_ == 0 || c_ == 0) throw InvalidInput("matrix dimensions must be positive");
  a_.reserve(r_ * c_);
  for (const auto& row : rows) {
    if (row.size() != c_) throw InvalidInput("ragged matrix literal");
    a_.insert(a_.end(), row.begin(), row.end());
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat Mat::diag(const Vec& d) {
  Mat m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Mat Mat::transpose() const {
  Mat t(c_, r_);
  for (std::size_t i = 0; i < r_; ++i)
    for (std::size_t j = 0; j < c_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool Mat::is_finite() const {
  return std::all_of(a_.begin(), a_.end(), [](double v) { return std::isfinite(v); });
}

double Mat::frobenius() const {
  double s = 0.0;
  for (double v : a_) s += v * v;
  return std::sqrt(s);
}

double Mat::max_abs() const {
  double m = 0.0;
  for (double v : a_) m = std::max(m, std::abs(v));
  return m;
}

Mat& Mat::operator+=(const Mat& o) {
  if (r_ != o.r_ || c_ != o.c_) throw InvalidInput("dimension mismatch in +");
  for (std::size_t k = 0; k < a_.size(); ++k) a_[k] += o.a_[k];
  return *this;
}

Mat& Mat::operator-=(const Mat& o) {
  if (r_ != o.r_ || c_ != o.c_) throw InvalidInput("dimension mismatch in -");
  for (std::size_t k = 0; k < a_.size(); ++k) a_[k] -= o.a_[k];
  return *this;
}

Mat& Mat::operator*=(double s) {
  for (double& v : a_) v *= s;
  return *this;
}

Mat Mat::block(std::size_t i0, std::size_t j0, std::size_t nr, std::size_t nc) const {
  if (i0 + nr > r_ || j0 + nc > c_) throw InvalidInput("block out of range");
  Mat b(nr, nc);
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t j = 0; j < nc; ++j) b(i, j) = (*this)(i0 + i, j0 + j);
  return b;
}

void Mat::set_block(std::size_t i0, std::size_t j0, const Mat& b) {
  if (i0 + b.rows() > r_ || j0 + b.cols() > c_) throw InvalidInput("block out of range");
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) (*this)(i0 + i, j0 + j) = b(i, j);
}

Mat operator+(Mat a, const Mat& b) { return a += b; }
Mat operator-(Mat a, const Mat& b) { return a -= b; }
Mat operator*(double s, Mat a) { return a *= s; }
Mat operator*(const Mat& a, const Mat& b) { return matmul(a, b); }

namespace {

void matmul_row(const Mat& a, const Mat& b, Mat& c, std::size_t i) {
  const std::size_t n = a.cols(), p = b.cols();
  double* ci = c.data() + i * p;
  const double* ai = a.data() + i * n;
  for (std::size_t k = 0; k < n; ++k) {
    const double aik = ai[k];
    if (aik == 0.0) continue;
    const double* bk = b.data() + k * p;
    for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
  }
}

void check_mul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows())
    throw InvalidInput("inner dimensions differ: " + std::to_string(a.cols()) + " vs " +
                       std::to_string(b.rows()));
}

}  // namespace

Mat matmul_serial(const Mat& a, const Mat& b) {
  check_mul(a, b);
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
  return c;
}

Mat matmul(const Mat& a, const Mat& b) {
  check_mul(a, b);
  Mat c(a.rows(), b.cols());
  const long long rows = static_cast<long long>(a.rows());
  const bool big = a.rows() * a.cols() * b.cols() > 32768;
#pragma omp parallel for schedule(static) if (big)
  for (long long i = 0; i < rows; ++i) matmul_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Vec matvec(const Mat& a, const Vec& x) {
  if (a.cols() != x.size()) throw InvalidInput("matvec dimension mismatch");
  Vec y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    const double* ai = a.data() + i * a.cols();
    for (std::size_t j = 0; j < a.cols(); ++j) s += ai[j] * x[j];
    y[i] = s;
  }
  return y;
}

Vec matvec_transposed(const Mat& a, const Vec& x) {
  if (a.rows() != x.size()) throw InvalidInput("matvec dimension mismatch");
  Vec y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * a.cols();
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += ai[j] * x[i];
  }
  return y;
}

double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw InvalidInput("dot dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, const Vec& x, Vec& y) {
  if (x.size() != y.size()) throw InvalidInput("axpy dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void require_finite(const Mat& m, const char* what) {
  if (!m.is_finite()) throw InvalidInput(std::string(what) + ": non-finite entry");
}

SymEig sym_eig(const Mat& m) {
  require_finite(m, "sym_eig");
  if (!m.square()) throw InvalidInput("sym_eig: matrix not square");
  const std::size_t n = m.rows();
  Mat a = m;
  // work on the exact symmetric part so rounding asymmetry cannot stall the sweep
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (m(i, j) + m(j, i));
  Mat v = Mat::identity(n);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += a(i, j) * a(i, j);
        if (i != j) off += a(i, j) * a(i, j);
      }
    if (off <= 1e-32 * total || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
  SymEig out{Vec(n), Mat(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

Vec singular_values(const Mat& m) {
  require_finite(m, "singular_values");
  // rows of `w` are the columns being orthogonalised
  Mat w = m.rows() >= m.cols() ? m.transpose() : m;
  const std::size_t k = w.rows(), len = w.cols();
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < k; ++p)
      for (std::size_t q = p + 1; q < k; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const double* wp = w.data() + p * len;
        const double* wq = w.data() + q * len;
        for (std::size_t i = 0; i < len; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        double* up = w.data() + p * len;
        double* uq = w.data() + q * len;
        for (std::size_t i = 0; i < len; ++i) {
          const double x = up[i], y = uq[i];
          up[i] = c * x - s * y;
          uq[i] = s * x + c * y;
        }
      }
    if (!rotated) break;
  }
  Vec sv(k);
  for (std::size_t p = 0; p < k; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += w(p, i) * w(p, i);
    sv[p] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

double spectral_norm(const Mat& m) { return singular_values(m).front(); }

double log_norm(const Mat& m) {
  require_finite(m, "log_norm");
  if (!m.square()) throw InvalidInput("log_norm: matrix not square");
  Mat h = m + m.transpose();
  h *= 0.5;
  return sym_eig(h).values.back();
}

Mat lu_solve(const Mat& a, const Mat& b) {
  if (!a.square() || a.rows() != b.rows()) throw InvalidInput("lu_solve dimension mismatch");
  const std::size_t n = a.rows(), p = b.cols();
  Mat lu = a, x = b;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
    if (lu(piv, k) == 0.0) throw Singular("lu_solve: singular matrix");
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
      for (std::size_t j = 0; j < p; ++j) std::swap(x(k, j), x(piv, j));
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu(i, k) / lu(k, k);
      lu(i, k) = f;
      for (std::size_t j = k + 1; j < n; ++j) lu(i, j) -= f * lu(k, j);
      for (std::size_t j = 0; j < p; ++j) x(i, j) -= f * x(k, j);
    }
  }
  for (std::size_t kk = n; kk-- > 0;) {
    for (std::size_t j = 0; j < p; ++j) {
      double s = x(kk, j);
      for (std::size_t i = kk + 1; i < n; ++i) s -= lu(kk, i) * x(i, j);
      x(kk, j) = s / lu(kk, kk);
    }
  }
  return x;
}

Mat matrix_exp(const Mat& m) {
  require_finite(m, "matrix_exp");
  if (!m.square()) throw InvalidInput("matrix_exp: matrix not square");
  static constexpr double b[] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                                 1187353796428800.0,  129060195264000.0,   10559470521600.0,
                                 670442572800.0,      33522128640.0,       1323241920.0,
                                 40840800.0,          960960.0,            16380.0,
                                 182.0,               1.0};
  constexpr double theta13 = 5.371920351148152;
  const std::size_t n = m.rows();

  double norm1 = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(m(i, j));
    norm1 = std::max(norm1, s);
  }
  int s = 0;
  if (norm1 > theta13) s = static_cast<int>(std::ceil(std::log2(norm1 / theta13)));
  Mat a = m;
  a *= std::ldexp(1.0, -s);

  const Mat id = Mat::identity(n);
  const Mat a2 = matmul_serial(a, a), a4 = matmul_serial(a2, a2), a6 = matmul_serial(a4, a2);
  Mat u_in = b[13] * a6 + b[11] * a4 + b[9] * a2;
  Mat u = matmul_serial(a6, u_in) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id;
  u = matmul_serial(a, u);
  Mat v_in = b[12] * a6 + b[10] * a4 + b[8] * a2;
  Mat v = matmul_serial(a6, v_in) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id;

  Mat r = lu_solve(v - u, v + u);
  for (int k = 0; k < s; ++k) r = matmul_serial(r, r);
  return r;
}

Mat sqrt_psd(const Mat& m, double tol) {
  require_finite(m, "sqrt_psd");
  if (!m.square()) throw InvalidInput("sqrt_psd: matrix not square");
  const std::size_t n = m.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m(i, j) - m(j, i)) > tol) throw InvalidInput("sqrt_psd: matrix not symmetric");
  SymEig e = sym_eig(m);
  if (e.values.front() < -tol)
    throw NotPsd("sqrt_psd: eigenvalue " + std::to_string(e.values.front()) + " below -tol");
  Mat s(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double root = std::sqrt(std::max(0.0, e.values[k]));
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = e.vectors(i, k) * root;
      for (std::size_t j = 0; j < n; ++j) s(i, j) += vi * e.vectors(j, k);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s(i, j) = s(j, i) = 0.5 * (s(i, j) + s(j, i));
  return s;
}

double condition_number(const Mat& m) {
  if (!m.square()) throw InvalidInput("condition_number: matrix not square");
  Vec sv = singular_values(m);
  if (sv.back() < 1e-14 * sv.front() || sv.front() == 0.0)
    throw Singular("condition_number: matrix numerically singular");
  return sv.front() / sv.back();
}

}  // namespace qsde
