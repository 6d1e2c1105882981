#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qsde/linalg.hpp"

namespace qsde {

/// Declared bound constants of a linear SDE dX = A(t) X dt + B(t) dW.
struct Bounds {
  double alpha_A = 0.0;     ///< max_t ||A(t)||
  double alpha_dA = 0.0;    ///< max_t ||dA/dt||
  double eta = 0.0;         ///< mu(A(t)) <= -eta
  double sigma = 0.0;       ///< ||B(t) B(t)^T|| <= sigma^2
  double kappa_BBT = 0.0;   ///< eigenvalues of B B^T in [sigma^2/kappa, sigma^2]; 0 = not declared
  double alpha_dBBT = 0.0;  ///< max_t ||d(B B^T)/dt||
};

class SdeProblem {
 public:
  using MatFn = std::function<Mat(double)>;

  SdeProblem(std::string name, int N, int m, double T, MatFn drift, MatFn diffusion, Vec x0,
             Bounds bounds, bool autonomous);

  const std::string& name() const { return name_; }
  int N() const { return N_; }
  int m() const { return m_; }
  double T() const { return T_; }
  const Vec& x0() const { return x0_; }
  const Bounds& bounds() const { return b_; }
  /// A and B do not depend on t; enables closed-form propagators.
  bool autonomous() const { return autonomous_; }
  /// B B^T has its eigenvalues in [sigma^2/kappa, sigma^2].
  bool full_rank_noise() const { return b_.kappa_BBT >= 1.0; }

  Mat A(double t) const { return drift_(t); }
  Mat B(double t) const { return diffusion_(t); }
  Mat BBt(double t) const;
  double max_eta_T() const;  ///< max{1, eta T}

 private:
  std::string name_;
  int N_, m_;
  double T_;
  MatFn drift_, diffusion_;
  Vec x0_;
  Bounds b_;
  bool autonomous_;
};

/// Coarse grid t_n = n dt with an optional fine grid of M points per step.
struct TimeGrid {
  int r = 1;
  int M = 1;
  double T = 1.0;
  double dt = 1.0;
  double dt_fine = 1.0;

  TimeGrid() = default;
  TimeGrid(double T, int r, int M = 1);

  double t(int n) const { return n == r ? T : n * dt; }
  double s(int n, int j) const { return t(n) + j * dt_fine; }
  double tau(int n, int j, int l) const { return s(n, j) + l * (t(n + 1) - s(n, j)) / M; }
};

// ---- built-in models ----

/// Names accepted by builtin_model.
std::vector<std::string> builtin_model_names();
/// Builds one of the bundled models. `params` may override defaults.
SdeProblem builtin_model(const std::string& name, const nlohmann::json& params = nlohmann::json::object());
/// Scalar OU dX = -theta X dt + sigma_b dW.
SdeProblem make_ou(double theta, double sigma_b, double x0, double T);
/// Diagonal OU with per-component rates, B = sigma_b I.
SdeProblem make_diag_ou(const Vec& theta, double sigma_b, const Vec& x0, double T);
/// Constant A and B with bound constants computed from the matrices.
SdeProblem make_constant(std::string name, const Mat& A, const Mat& B, Vec x0, double T);

/// Reads {N, m, T, x0, model: {kind, params}, bounds: {...}}.
SdeProblem load_problem(const nlohmann::json& doc);
SdeProblem load_problem_file(const std::string& path);

// ---- validation ----

struct BoundViolationEntry {
  std::string what;
  double t;
  double measured;
  double declared;
};

struct BoundsReport {
  double max_norm_A = 0.0;
  double max_log_norm_A = -1e300;
  double min_eig_BBt = 1e300;
  double max_eig_BBt = -1e300;
  double max_norm_B_sq = 0.0;
  bool dyson_mode = false;  ///< whether the eigenvalue-range assumption was checked
  std::vector<BoundViolationEntry> violations;
  bool pass() const { return violations.empty(); }
};

BoundsReport validate_bounds(const SdeProblem& p, int samples);

/// Extends the state to the next power of two. Dummy components get drift -eta and no noise.
SdeProblem pad_to_power_of_two(const SdeProblem& p);

// ---- reference propagators ----

/// Phi(t, s) by classical RK4 (closed form for autonomous problems).
Mat exact_phi(const SdeProblem& p, double s, double t, int steps = 0);
/// Sigma(t, s) = int_s^t Phi(t,u) B B^T Phi(t,u)^T du by composite Gauss-Legendre.
Mat exact_sigma(const SdeProblem& p, double s, double t, int nodes = 32, int panels = 1);
std::pair<double, double> ou_analytic_moments(double theta, double sigma_b, double x0, double t);

/// Gauss-Legendre nodes and weights on [-1, 1].
void gauss_legendre(int n, Vec& x, Vec& w);

}  // namespace qsde
