#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "qsde/dyson.hpp"
#include "qsde/linalg.hpp"
#include "qsde/model.hpp"
#include "qsde/prng.hpp"

namespace qsde {

enum class SystemKind { dyson, dyson_padded, em };

/// Unit lower block-bidiagonal system: identity diagonal, -blocks[n] below it,
/// followed by R padding rows with -I below the diagonal.
struct HistorySystem {
  SystemKind kind = SystemKind::dyson;
  std::vector<Mat> blocks;
  int r = 0;
  int R = 0;
  std::size_t N = 0;

  std::size_t dim() const { return N * static_cast<std::size_t>(r + R + 1); }
  /// Dense form; refuses above 4096 rows.
  Mat dense() const;
};

HistorySystem assemble(SystemKind kind, std::vector<Mat> blocks, int R);
/// (x0, Delta_0, ..., Delta_{r-1}, 0, ..., 0) with R trailing zero blocks.
Vec assemble_rhs(const Vec& x0, const std::vector<Vec>& noise, int R);
/// Block (n, n') of the inverse system matrix.
Mat inverse_block(const HistorySystem& sys, int n, int n_prime);
/// x_0 = b_0, x_{n+1} = Phi_n x_n + b_{n+1}; x_{r+k} = x_{r+k-1} + b_{r+k}.
Vec forward_solve(const HistorySystem& sys, const Vec& b);

enum class QlssMode { honest, adversarial };
QlssMode parse_qlss_mode(const std::string& s);
const char* to_string(QlssMode m);

/// Emulated inversion error: adversarial mode adds inv_error * ||b|| along a pseudorandom unit direction.
struct QlssModel {
  QlssMode mode = QlssMode::honest;
  double inv_error = 0.0;
  PcgStream stream{};
  std::uint64_t index = 1;
};

struct HistoryState {
  Vec raw;
  double prefactor = 0.0;  ///< amplitude normalization of the emulated state
  double U_B = 0.0;
  double qlss_eps = 0.0;   ///< inversion budget in the rescaled frame
  int r = 0, R = 0;
  std::size_t N = 0;

  Vec block(int n) const;
  double amplitude_mass() const { return prefactor * norm2(raw); }
};

HistoryState solve(const HistorySystem& sys, const Vec& b, const QlssModel& q);

struct NormBoundReport {
  double norm_A = 0.0;
  double norm_inv = 0.0;
  double cond = 0.0;
  double bound_inv = 0.0;
  bool pass = false;
};

/// Measured ||A^{-1}|| against 2r/max{1,eta T} + R (exact blocks) or 4r/max{1,eta T} + R.
NormBoundReport norm_bound_report(const HistorySystem& sys, const SdeProblem& p, bool exact_blocks);

/// Exact one-step propagators Phi(t_{n+1}, t_n).
std::vector<Mat> exact_phi_blocks(const SdeProblem& p, const TimeGrid& grid);

// ---- end-to-end history states for the Dyson method ----

struct HistoryOptions {
  double eps = 0.1;          ///< target: ||X~~ - X|| <= U_B eps
  double varepsilon = 0.0;   ///< per-block accuracy; 0 selects the combined formula
  bool padded = false;
  int R = -1;                ///< padding; negative selects round(r_c / max{1, eta T})
  double U_SN = 0.0;         ///< clip level; 0 selects choose_usn(r_c, N, N_s, delta)
  double N_s = 1.0;
  double delta = 0.1;
  bool perturb_sqrt = false;
  int m_cap = 0;             ///< 0 selects 2^15 (autonomous) or 2^10 fine steps
  std::uint64_t seed = 20240601ULL;
  std::uint64_t stream_id = 1;
};

struct HistoryPlan {
  int K_c = 0;
  int r_c = 0;
  double M_c = 0.0;
  int M_emu = 0;
  int R = 0;
  double dt = 0.0;
  double varepsilon = 0.0;
  double U_SN = 0.0;
  double U_B = 0.0;
  double prefactor = 0.0;
  double alpha_A_tilde = 0.0;
  double kappa_A_tilde = 0.0;
  double eps3 = 0.0;
  double sigma_budget = 0.0;  ///< relative accuracy aimed at for Sigma~
};

struct HistoryCheck {
  std::uint64_t sample = 0;
  double deviation = 0.0;    ///< full history (unpadded) or worst tail block (padded)
  double bound = 0.0;
  double phi_err = 0.0, phi_limit = 0.0;
  double delta_err = 0.0, eps2 = 0.0;
  double eps1 = 0.0, delta_max = 0.0;
  double rhs_norm = 0.0;
  double amplitude_mass = 0.0;
  std::vector<double> step_errors;
  bool phi_ok = false, delta_ok = false, rhs_ok = false, deviation_ok = false;
  bool pass() const { return phi_ok && delta_ok && rhs_ok && deviation_ok; }
};

class HistoryContext {
 public:
  HistoryContext(const SdeProblem& p, const HistoryOptions& opt);

  const HistoryPlan& plan() const { return plan_; }
  const SdeProblem& problem() const { return p_; }
  const HistorySystem& system() const { return sys_; }
  const CovApprox& covariance() const { return cov_; }
  ClipBound clip_bound() const { return {plan_.U_SN}; }
  const PcgStream& stream() const { return stream_; }

  std::vector<Vec> approx_noise(std::uint64_t i) const;
  std::vector<Vec> exact_noise(std::uint64_t i) const;
  HistoryState state(std::uint64_t i, QlssMode mode) const;
  /// Emulated solver behaviour used by state(i, mode).
  QlssModel qlss(std::uint64_t i, QlssMode mode) const;
  /// Reference history from exact propagators and exact covariance roots with the same clipped z.
  Vec reference(std::uint64_t i) const;
  HistoryCheck verify(std::uint64_t i, QlssMode mode) const;

 private:
  SdeProblem p_;
  HistoryOptions opt_;
  HistoryPlan plan_;
  TimeGrid grid_;
  HistorySystem sys_;
  HistorySystem exact_sys_;
  CovApprox cov_;
  std::vector<Mat> exact_S_;
  PcgStream stream_;
};

/// Builds the context, verifies sample i, and throws BoundViolation when the pathwise bound fails.
HistoryState history_state(const SdeProblem& p, const HistoryOptions& opt, std::uint64_t i, QlssMode mode);

}  // namespace qsde
