#include "qsde/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace qsde {

using nlohmann::json;

SdeProblem::SdeProblem(std::string name, int N, int m, double T, MatFn drift, MatFn diffusion,
                       Vec x0, Bounds bounds, bool autonomous)
    : name_(std::move(name)),
      N_(N),
      m_(m),
      T_(T),
      drift_(std::move(drift)),
      diffusion_(std::move(diffusion)),
      x0_(std::move(x0)),
      b_(bounds),
      autonomous_(autonomous) {
  if (!(T_ > 0.0)) throw InvalidInput("T must be positive");
  if (N_ < 1) throw InvalidInput("N must be at least 1");
  if (m_ < 1 || m_ > N_) throw InvalidInput("m must satisfy 1 <= m <= N");
  if (static_cast<int>(x0_.size()) != N_) throw InvalidInput("x0 has wrong length");
  if (!(b_.eta > 0.0)) throw InvalidInput("eta must be positive");
  if (b_.eta > b_.alpha_A * (1.0 + 1e-12)) throw InvalidInput("eta must not exceed alpha_A");
  if (!(b_.sigma >= 0.0)) throw InvalidInput("sigma must be non-negative");
  Mat a0 = drift_(0.0), b0 = diffusion_(0.0);
  if (static_cast<int>(a0.rows()) != N_ || !a0.square()) throw InvalidInput("A(t) must be N x N");
  if (static_cast<int>(b0.rows()) != N_ || static_cast<int>(b0.cols()) != m_)
    throw InvalidInput("B(t) must be N x m");
}

Mat SdeProblem::BBt(double t) const {
  Mat b = B(t);
  return matmul_serial(b, b.transpose());
}

double SdeProblem::max_eta_T() const { return std::max(1.0, b_.eta * T_); }

TimeGrid::TimeGrid(double T_, int r_, int M_) : r(r_), M(M_), T(T_) {
  if (r < 1 || M < 1) throw InvalidInput("grid needs r >= 1 and M >= 1");
  dt = T / r;
  dt_fine = dt / M;
}

// ---------------------------------------------------------------------------
// models

namespace {

double jget(const json& j, const char* key, double dflt) { return j.contains(key) ? j.at(key).get<double>() : dflt; }

Vec jvec(const json& j, const char* key, Vec dflt) {
  return j.contains(key) ? j.at(key).get<Vec>() : dflt;
}

Mat jmat(const json& j) {
  auto rows = j.get<std::vector<Vec>>();
  if (rows.empty() || rows[0].empty()) throw ConfigError("empty matrix in model parameters");
  Mat m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols()) throw ConfigError("ragged matrix in model parameters");
    for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = rows[i][k];
  }
  return m;
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

Bounds bounds_from_constant(const Mat& A, const Mat& B) {
  Bounds b;
  b.alpha_A = spectral_norm(A);
  b.eta = -log_norm(A);
  b.alpha_dA = 0.0;
  b.alpha_dBBT = 0.0;
  Mat bbt = matmul_serial(B, B.transpose());
  Vec ev = sym_eig(bbt).values;
  b.sigma = std::sqrt(std::max(0.0, ev.back()));
  if (ev.front() > 1e-12 * ev.back() && ev.back() > 0.0)
    b.kappa_BBT = ev.back() / ev.front();
  else
    b.kappa_BBT = 0.0;
  return b;
}

SdeProblem make_timedep(double a0, double a1, double b0, double b1, double x0, double T) {
  if (a0 <= 0.0 || a1 < 0.0 || b0 <= 0.0 || b1 < 0.0) throw ConfigError("timedep parameters out of range");
  Bounds b;
  b.alpha_A = a0 + a1 * T;
  b.alpha_dA = a1;
  b.eta = a0;
  b.sigma = b0 * (1.0 + b1 * T);
  b.kappa_BBT = (1.0 + b1 * T) * (1.0 + b1 * T);
  b.alpha_dBBT = 2.0 * b0 * b0 * b1 * (1.0 + b1 * T);
  auto drift = [a0, a1](double t) { return Mat{{-(a0 + a1 * t)}}; };
  auto diff = [b0, b1](double t) { return Mat{{b0 * (1.0 + b1 * t)}}; };
  return SdeProblem("timedep", 1, 1, T, drift, diff, Vec{x0}, b, a1 == 0.0 && b1 == 0.0);
}

}  // namespace

SdeProblem make_constant(std::string name, const Mat& A, const Mat& B, Vec x0, double T) {
  Bounds b = bounds_from_constant(A, B);
  const int N = static_cast<int>(A.rows()), m = static_cast<int>(B.cols());
  return SdeProblem(std::move(name), N, m, T, [A](double) { return A; }, [B](double) { return B; },
                    std::move(x0), b, true);
}

SdeProblem make_ou(double theta, double sigma_b, double x0, double T) {
  if (theta <= 0.0) throw InvalidInput("theta must be positive");
  return make_constant("ou", Mat{{-theta}}, Mat{{sigma_b}}, Vec{x0}, T);
}

SdeProblem make_diag_ou(const Vec& theta, double sigma_b, const Vec& x0, double T) {
  Vec neg(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (theta[i] <= 0.0) throw InvalidInput("theta must be positive");
    neg[i] = -theta[i];
  }
  Mat B = Mat::identity(theta.size());
  B *= sigma_b;
  return make_constant("ou-diag", Mat::diag(neg), B, x0, T);
}

std::vector<std::string> builtin_model_names() {
  return {"ou", "ou-diag", "const-diag", "rotating", "timedep", "ou-degenerate"};
}

SdeProblem builtin_model(const std::string& name, const json& params) {
  const json& p = params.is_null() ? json::object() : params;
  const double T = jget(p, "T", 1.0);
  if (name == "ou") {
    reject_unknown(p, {"theta", "sigma_b", "x0", "T"}, "ou parameters");
    return make_ou(jget(p, "theta", 1.0), jget(p, "sigma_b", 1.0), jget(p, "x0", 1.0), T);
  }
  if (name == "ou-diag") {
    reject_unknown(p, {"theta", "sigma_b", "x0", "T"}, "ou-diag parameters");
    Vec theta = jvec(p, "theta", {0.5, 1.0, 1.5, 2.0});
    Vec x0 = jvec(p, "x0", Vec(theta.size(), 1.0));
    return make_diag_ou(theta, jget(p, "sigma_b", 1.0), x0, T);
  }
  if (name == "const-diag") {
    reject_unknown(p, {"a", "b", "x0", "T"}, "const-diag parameters");
    Vec a = jvec(p, "a", {-1.0, -2.0});
    Vec b = jvec(p, "b", {1.0, 0.5});
    if (a.size() != b.size()) throw ConfigError("const-diag: a and b differ in length");
    Vec x0 = jvec(p, "x0", Vec(a.size(), 1.0));
    return make_constant("const-diag", Mat::diag(a), Mat::diag(b), x0, T);
  }
  if (name == "rotating") {
    reject_unknown(p, {"eta", "omega", "sigma_b", "x0", "T"}, "rotating parameters");
    const double eta = jget(p, "eta", 1.0), omega = jget(p, "omega", 2.0), sb = jget(p, "sigma_b", 1.0);
    Mat A(4, 4);
    for (int i = 0; i < 4; ++i) A(i, i) = -eta;
    A(0, 1) = omega;
    A(1, 0) = -omega;
    A(2, 3) = 0.5 * omega;
    A(3, 2) = -0.5 * omega;
    Mat B = Mat::identity(4);
    B *= sb;
    return make_constant("rotating", A, B, jvec(p, "x0", {1.0, 0.0, 1.0, 0.0}), T);
  }
  if (name == "timedep") {
    reject_unknown(p, {"a0", "a1", "b0", "b1", "x0", "T"}, "timedep parameters");
    return make_timedep(jget(p, "a0", 1.0), jget(p, "a1", 0.2), jget(p, "b0", 1.0), jget(p, "b1", 0.1),
                        jget(p, "x0", 1.0), T);
  }
  if (name == "ou-degenerate") {
    reject_unknown(p, {"theta", "coupling", "x0", "T"}, "ou-degenerate parameters");
    Vec theta = jvec(p, "theta", {1.0, 1.5, 2.0, 2.5});
    const double c = jget(p, "coupling", 0.5);
    const std::size_t N = theta.size();
    Mat A(N, N);
    for (std::size_t i = 0; i < N; ++i) {
      A(i, i) = -theta[i];
      if (i > 0) A(i, i - 1) = c;
    }
    Mat B(N, 1);
    B(0, 0) = 1.0;
    return make_constant("ou-degenerate", A, B, jvec(p, "x0", Vec(N, 1.0)), T);
  }
  throw ConfigError("unknown model '" + name + "'");
}

SdeProblem load_problem(const json& doc) {
  reject_unknown(doc, {"name", "N", "m", "T", "x0", "model", "bounds"}, "problem document");
  if (!doc.contains("model")) throw ConfigError("problem document needs a 'model' object");
  const json& model = doc.at("model");
  reject_unknown(model, {"kind", "params"}, "model");
  const std::string kind = model.at("kind").get<std::string>();
  json params = model.value("params", json::object());

  auto base = [&]() -> SdeProblem {
    if (kind == "constant" || kind == "linear") {
      reject_unknown(params, {"A", "B", "A0", "A1", "B0", "B1"}, kind + " parameters");
      if (!doc.contains("T") || !doc.contains("x0")) throw ConfigError(kind + " model needs T and x0");
      const double T = doc.at("T").get<double>();
      Vec x0 = doc.at("x0").get<Vec>();
      if (kind == "constant") return make_constant(doc.value("name", "constant"), jmat(params.at("A")),
                                                   jmat(params.at("B")), x0, T);
      Mat A0 = jmat(params.at("A0")), A1 = jmat(params.at("A1"));
      Mat B0 = jmat(params.at("B0")), B1 = jmat(params.at("B1"));
      if (!doc.contains("bounds")) throw ConfigError("linear model needs declared bounds");
      const int N = static_cast<int>(A0.rows()), m = static_cast<int>(B0.cols());
      auto drift = [A0, A1](double t) { return A0 + t * A1; };
      auto diff = [B0, B1](double t) { return B0 + t * B1; };
      Bounds placeholder;
      placeholder.alpha_A = 1.0;
      placeholder.eta = 1.0;
      return SdeProblem(doc.value("name", "linear"), N, m, T, drift, diff, x0, placeholder, false);
    }
    json merged = params;
    if (doc.contains("T")) merged["T"] = doc.at("T");
    if (doc.contains("x0")) {
      if (kind == "ou" || kind == "timedep")
        merged["x0"] = doc.at("x0").at(0);
      else
        merged["x0"] = doc.at("x0");
    }
    return builtin_model(kind, merged);
  }();

  Bounds b = base.bounds();
  if (doc.contains("bounds")) {
    const json& jb = doc.at("bounds");
    reject_unknown(jb, {"alpha_A", "eta", "sigma", "kappa_BBT", "alpha_dA", "alpha_dBBT"}, "bounds");
    b.alpha_A = jget(jb, "alpha_A", b.alpha_A);
    b.eta = jget(jb, "eta", b.eta);
    b.sigma = jget(jb, "sigma", b.sigma);
    b.kappa_BBT = jget(jb, "kappa_BBT", b.kappa_BBT);
    b.alpha_dA = jget(jb, "alpha_dA", b.alpha_dA);
    b.alpha_dBBT = jget(jb, "alpha_dBBT", b.alpha_dBBT);
  }
  SdeProblem out(doc.value("name", base.name()), base.N(), base.m(), base.T(),
                 [base](double t) { return base.A(t); }, [base](double t) { return base.B(t); },
                 base.x0(), b, base.autonomous());
  if (doc.contains("N") && doc.at("N").get<int>() != out.N()) throw ConfigError("declared N does not match model");
  if (doc.contains("m") && doc.at("m").get<int>() != out.m()) throw ConfigError("declared m does not match model");
  return out;
}

SdeProblem load_problem_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open problem file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("problem file is not valid JSON: ") + e.what());
  }
  return load_problem(doc);
}

// ---------------------------------------------------------------------------
// validation

BoundsReport validate_bounds(const SdeProblem& p, int samples) {
  if (samples < 2) throw InvalidInput("validate_bounds needs at least 2 samples");
  const Bounds& b = p.bounds();
  BoundsReport rep;
  rep.dyson_mode = p.full_rank_noise();
  const double rel = 1e-12, abs_tol = 1e-12;
  const double h = p.T() / (samples - 1);
  Mat prevA, prevBB;
  for (int k = 0; k < samples; ++k) {
    const double t = k == samples - 1 ? p.T() : k * h;
    Mat A = p.A(t), BB = p.BBt(t);
    const double nA = spectral_norm(A), mu = log_norm(A);
    Vec ev = sym_eig(BB).values;
    rep.max_norm_A = std::max(rep.max_norm_A, nA);
    rep.max_log_norm_A = std::max(rep.max_log_norm_A, mu);
    rep.min_eig_BBt = std::min(rep.min_eig_BBt, ev.front());
    rep.max_eig_BBt = std::max(rep.max_eig_BBt, ev.back());
    rep.max_norm_B_sq = std::max(rep.max_norm_B_sq, ev.back());
    if (nA > b.alpha_A * (1 + rel) + abs_tol) rep.violations.push_back({"norm_A", t, nA, b.alpha_A});
    if (mu > -b.eta + abs_tol) rep.violations.push_back({"log_norm_A", t, mu, -b.eta});
    const double s2 = b.sigma * b.sigma;
    if (ev.back() > s2 * (1 + rel) + abs_tol) rep.violations.push_back({"norm_BBt", t, ev.back(), s2});
    if (rep.dyson_mode && ev.front() < s2 / b.kappa_BBT - abs_tol)
      rep.violations.push_back({"min_eig_BBt", t, ev.front(), s2 / b.kappa_BBT});
    if (k > 0) {
      // secant slopes never exceed the derivative bound
      const double dA = spectral_norm(A - prevA) / h, dBB = spectral_norm(BB - prevBB) / h;
      if (dA > b.alpha_dA * (1 + 1e-9) + 1e-9) rep.violations.push_back({"norm_dA", t, dA, b.alpha_dA});
      if (dBB > b.alpha_dBBT * (1 + 1e-9) + 1e-9) rep.violations.push_back({"norm_dBBt", t, dBB, b.alpha_dBBT});
    }
    prevA = std::move(A);
    prevBB = std::move(BB);
  }
  return rep;
}

SdeProblem pad_to_power_of_two(const SdeProblem& p) {
  int Np = 1;
  while (Np < p.N()) Np *= 2;
  if (Np == p.N()) return p;
  const int N = p.N(), m = p.m();
  const double eta = p.bounds().eta;
  auto drift = [p, Np, N, eta](double t) {
    Mat a(Np, Np);
    a.set_block(0, 0, p.A(t));
    for (int i = N; i < Np; ++i) a(i, i) = -eta;
    return a;
  };
  auto diff = [p, Np, m](double t) {
    Mat b(Np, m);
    b.set_block(0, 0, p.B(t));
    return b;
  };
  Vec x0 = p.x0();
  x0.resize(Np, 0.0);
  Bounds b = p.bounds();
  b.kappa_BBT = 0.0;  // zero noise rows make B B^T singular
  return SdeProblem(p.name() + "-padded", Np, m, p.T(), drift, diff, x0, b, p.autonomous());
}

// ---------------------------------------------------------------------------
// propagators

Mat exact_phi(const SdeProblem& p, double s, double t, int steps) {
  if (s > t) throw InvalidInput("exact_phi: invalid interval s > t");
  const std::size_t N = p.N();
  if (s == t) return Mat::identity(N);
  if (p.autonomous()) {
    Mat a = p.A(s);
    a *= (t - s);
    return matrix_exp(a);
  }
  if (steps <= 0)
    steps = std::max(16, static_cast<int>(std::ceil(256.0 * (t - s) * std::max(1.0, p.bounds().alpha_A))));
  const double h = (t - s) / steps;
  Mat phi = Mat::identity(N);
  for (int k = 0; k < steps; ++k) {
    const double u = s + k * h;
    Mat a1 = p.A(u), a2 = p.A(u + 0.5 * h), a3 = p.A(u + h);
    Mat k1 = matmul_serial(a1, phi);
    Mat k2 = matmul_serial(a2, phi + (0.5 * h) * k1);
    Mat k3 = matmul_serial(a2, phi + (0.5 * h) * k2);
    Mat k4 = matmul_serial(a3, phi + h * k3);
    Mat incr = k1 + 2.0 * k2 + 2.0 * k3 + k4;
    incr *= h / 6.0;
    phi += incr;
  }
  return phi;
}

void gauss_legendre(int n, Vec& x, Vec& w) {
  if (n < 1) throw InvalidInput("gauss_legendre needs n >= 1");
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = 1.0, p2 = 0.0;
      for (int k = 1; k <= n; ++k) {
        const double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * k - 1.0) * z * p2 - (k - 1.0) * p3) / k;
      }
      pp = n * (z * p1 - p2) / (z * z - 1.0);
      const double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) < 1e-15) break;
    }
    x[i] = -z;
    x[n - 1 - i] = z;
    w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * pp * pp);
  }
}

Mat exact_sigma(const SdeProblem& p, double s, double t, int nodes, int panels) {
  if (s > t) throw InvalidInput("exact_sigma: invalid interval s > t");
  if (panels < 1) throw InvalidInput("exact_sigma: panels must be positive");
  const std::size_t N = p.N();
  Mat acc(N, N);
  if (s == t) return acc;
  Vec gx, gw;
  gauss_legendre(nodes, gx, gw);
  const double width = (t - s) / panels;
  for (int q = 0; q < panels; ++q) {
    const double a = s + q * width, half = 0.5 * width, mid = a + half;
    for (int k = 0; k < nodes; ++k) {
      const double u = mid + half * gx[k];
      Mat phi = exact_phi(p, u, t);
      Mat pb = matmul_serial(phi, p.B(u));
      Mat term = matmul_serial(pb, pb.transpose());
      term *= half * gw[k];
      acc += term;
    }
  }
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) acc(i, j) = acc(j, i) = 0.5 * (acc(i, j) + acc(j, i));
  return acc;
}

std::pair<double, double> ou_analytic_moments(double theta, double sigma_b, double x0, double t) {
  if (theta <= 0.0) throw InvalidInput("ou_analytic_moments: theta must be positive");
  const double mean = std::exp(-theta * t) * x0;
  const double var = sigma_b * sigma_b * (-std::expm1(-2.0 * theta * t)) / (2.0 * theta);
  return {mean, var};
}

}  // namespace qsde
