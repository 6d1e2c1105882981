#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qsde/history.hpp"
#include "qsde/model.hpp"
#include "qsde/prng.hpp"

namespace qsde {

struct EmTrajectory {
  TimeGrid grid;
  std::vector<Vec> states;  ///< X_0 ... X_r
  std::vector<Vec> noise;   ///< Delta_n = B(t_n) sqrt(dt) z_n
};

/// Delta_0..Delta_{r-1} for sample i with z clipped at the given level.
std::vector<Vec> em_noise(const SdeProblem& p, const TimeGrid& grid, const PcgStream& stream, std::uint64_t i,
                          ClipBound clip_bound);
EmTrajectory em_trajectory(const SdeProblem& p, const TimeGrid& grid, const PcgStream& stream, std::uint64_t i,
                           ClipBound clip_bound);

/// Smallest r with dt <= eta / (4 alpha_A^2).
int em_min_steps(const SdeProblem& p);
/// Subdiagonal blocks I + A(t_n) dt.
HistorySystem assemble_em_system(const SdeProblem& p, const TimeGrid& grid);

struct EmNormReport {
  bool applicable = false;
  std::string reason;
  double norm_A = 0.0, bound_A = 3.0;
  double norm_inv = 0.0, bound_inv = 0.0;
  double cond = 0.0, bound_cond = 0.0;
  double max_step_norm = 0.0, step_bound = 0.0;  ///< max_n ||I + A(t_n) dt|| vs 1 - eta dt / 4
  bool pass = false;
};
EmNormReport em_norm_report(const SdeProblem& p, const TimeGrid& grid);

struct StrongConvergenceReport {
  std::vector<int> r_list;
  std::vector<double> rms_error;  ///< sqrt(max_n E||X_n - X_ref(t_n)||^2)
  double slope = 0.0;             ///< least-squares slope of log rms against log r
  double c_st = 0.0;              ///< max_r r^2 * MSE
  int r_fine = 0;
  int paths = 0;
};

/// Coupled-path strong error against a fine-grid EM reference (64 x the largest r).
StrongConvergenceReport strong_convergence(const SdeProblem& p, const std::vector<int>& r_list, int paths,
                                           const PcgStream& stream);

struct EmHistoryCheck {
  double deviation = 0.0, bound = 0.0;
  double rhs_norm = 0.0, U_B = 0.0;
  double amplitude_mass = 0.0;
  bool pass() const { return deviation <= bound && rhs_norm <= U_B * (1.0 + 1e-12); }
};

/// Emulated EM history state. Requires r >= em_min_steps(p).
class EmHistoryContext {
 public:
  EmHistoryContext(const SdeProblem& p, int r, double eps, double U_SN, const PcgStream& stream);

  double U_B() const { return U_B_; }
  double prefactor() const { return prefactor_; }
  double qlss_eps() const { return qlss_eps_; }
  const TimeGrid& grid() const { return grid_; }
  const HistorySystem& system() const { return sys_; }
  ClipBound clip_bound() const { return {U_SN_}; }

  Vec rhs(std::uint64_t i) const;
  HistoryState state(std::uint64_t i, QlssMode mode) const;
  QlssModel qlss(std::uint64_t i, QlssMode mode) const;
  const PcgStream& stream() const { return stream_; }
  double eps() const { return eps_; }
  EmHistoryCheck verify(std::uint64_t i, QlssMode mode) const;

 private:
  SdeProblem p_;
  TimeGrid grid_;
  double eps_, U_SN_, U_B_, prefactor_, qlss_eps_;
  HistorySystem sys_;
  PcgStream stream_;
};

/// Builds, verifies sample i and throws BoundViolation if the pathwise bound fails.
HistoryState em_history_state(const SdeProblem& p, int r, const PcgStream& stream, std::uint64_t i, double eps,
                              double U_SN, QlssMode mode);

}  // namespace qsde
