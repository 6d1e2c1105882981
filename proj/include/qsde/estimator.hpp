#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qsde/em.hpp"
#include "qsde/history.hpp"
#include "qsde/model.hpp"
#include "qsde/prng.hpp"

namespace qsde {

// ---- observables ----

/// One slot of a tensor index: time step (-1 = terminal) and state component.
struct Slot {
  int step = -1;
  int comp = 0;
  auto operator<=>(const Slot&) const = default;
};

struct ObservableEntry {
  std::vector<Slot> idx;
  double val = 0.0;
};

/// Sparse order-d tensor C over the history vector. Duplicate indices are merged.
class ObservableTensor {
 public:
  ObservableTensor(int d, int N, std::vector<ObservableEntry> entries);

  /// {"d": 2, "entries": [{"idx": [[-1, 0], [-1, 0]], "val": 1}]}. A bare integer k means [-1, k].
  static ObservableTensor from_json(const nlohmann::json& doc, int N);
  nlohmann::json to_json() const;

  /// Single unit entry on the terminal component `comp`, repeated d times.
  static ObservableTensor terminal_power(int d, int N, int comp);
  /// sum_k C_{k..k} on the terminal slot with unit weights.
  static ObservableTensor terminal_sum(int d, int N);

  int d() const { return d_; }
  int N() const { return N_; }
  const std::vector<ObservableEntry>& entries() const { return entries_; }
  double frob_norm() const { return frob_; }
  /// Every slot refers to the terminal time.
  bool terminal_only(int r) const;

  /// Flat indices n * N + comp for a grid of r steps.
  struct Resolved {
    std::vector<std::vector<std::size_t>> idx;
    Vec val;
    double frob = 0.0;
  };
  Resolved resolve(int r) const;

  /// (1/N_s) sum_i sum_e C_e prod_k x^(i)[j_k] for a single history vector.
  double evaluate(const Vec& history, int r) const;

 private:
  int d_, N_;
  std::vector<ObservableEntry> entries_;
  double frob_ = 0.0;
};

/// E[Y] from the exact Gaussian law of (X_{t_0}, ..., X_{t_r}) via exact propagators and Isserlis' theorem.
double gaussian_truth(const SdeProblem& p, const ObservableTensor& C, int r);

// ---- plans ----

enum class EstimatorMode { dyson_multi, dyson_terminal, em_multi };
const char* to_string(EstimatorMode m);
EstimatorMode parse_estimator_mode(const std::string& s);

struct EstimationPlan {
  EstimatorMode mode = EstimatorMode::dyson_multi;
  double eps = 0.0, delta = 0.0, delta_prime = 0.0;
  int d = 1;
  double C_frob = 0.0;
  double eps_prime = 0.0;         ///< per-sample history accuracy
  double varepsilon_prime = 0.0;  ///< per-block accuracy for the Dyson constructions
  std::uint64_t N_s = 0;
  double U_SN = 0.0;
  int r = 0, K = 0;
  double M = 0.0;
  int R = 0;
  double U_B = 0.0;
  double prefactor = 0.0;  ///< amplitude scale of one history state
  double eps_OE = 0.0;
  double rescale = 0.0;    ///< mu_hat = rescale * overlap
  double c_st = 0.0;
  int em_iterations = 0;
  double sample_error_bound = 0.0;  ///< bound on |Y_hat - E[Y]| holding with probability 1 - delta'

  nlohmann::json to_json() const;
};

/// Multi-time Dyson estimator parameters. Throws Infeasible if eps' > 1/3.
EstimationPlan plan_multi_time(const SdeProblem& p, const ObservableTensor& C, double eps, double delta);
/// Terminal-time parameters (padded, observables of X_T only).
EstimationPlan plan_terminal(const SdeProblem& p, const ObservableTensor& C, double eps, double delta);
/// EM estimator parameters; (r, eps'_EM) by fixed-point iteration (at most 20 rounds).
EstimationPlan plan_em(const SdeProblem& p, const ObservableTensor& C, double eps, double delta, double c_st);
/// EM estimator in relative form: eps'_EM from eps_rel, r from it, then eps follows.
EstimationPlan plan_em_relative(const SdeProblem& p, const ObservableTensor& C, double eps_rel, double delta,
                                double c_st);

/// Absolute accuracy for a relative target (scales of the moment bounds). r is used by the multi-time form.
double relative_eps_multi(const SdeProblem& p, const ObservableTensor& C, double eps_rel);
double relative_eps_terminal(const SdeProblem& p, const ObservableTensor& C, double eps_rel);

// ---- overlap estimation ----

enum class OverlapMode { exact, shot };

struct QueryLedger {
  std::uint64_t overlap_queries = 0;      ///< ceil(4 log(1/delta') / eps_OE)
  std::uint64_t history_oracle_uses = 0;  ///< overlap_queries * d
  std::uint64_t qlss_calls_per_history = 0;
  std::uint64_t u_A_calls = 0;
  std::uint64_t u_rand_calls = 0;
  nlohmann::json to_json() const;
};
QueryLedger query_ledger(const SdeProblem& p, const EstimationPlan& plan);

/// Normalized amplitude vector of the observable state over (sample, slot indices).
/// Dense, so only for small N_s, r and d.
Vec build_observable_state(const ObservableTensor& C, const EstimationPlan& plan);

/// <u|v> exactly, or with truncated Gaussian noise of sd eps_OE / 3 (clamped to +-eps_OE).
double overlap_estimate(const Vec& u, const Vec& v, double eps_OE, OverlapMode mode, const PcgStream& stream,
                        std::uint64_t index);
/// Noise term of the shot model for a known exact overlap.
double overlap_noise(double eps_OE, const PcgStream& stream, std::uint64_t index);

// ---- sampling ----

/// Per-sample history vectors (x_0, ..., x_r, x_r, ...) from block recursions.
struct PathSampler {
  std::size_t N = 0, w = 0;
  int r = 0, R = 0;
  std::vector<Mat> step;   ///< x_{n+1} = step[n] x_n + noise[n] (scale * clip(z_n))
  std::vector<Mat> noise;  ///< N x w
  double noise_scale = 1.0;
  Vec x0;
  double U_SN = std::numeric_limits<double>::infinity();
  PcgStream stream{};
  QlssMode mode = QlssMode::honest;
  double inv_error = 0.0;
  PcgStream qlss_stream{};

  std::size_t dim() const { return N * static_cast<std::size_t>(r + R + 1); }
  /// Writes sample i into x (resized to dim()); z is scratch.
  void sample(std::uint64_t i, Vec& z, Vec& x) const;
  /// Same, reading the normals of sample i from a cursor positioned at its first entry.
  void sample(std::uint64_t i, NormalCursor& cur, Vec& z, Vec& x) const;
  std::uint64_t first_normal(std::uint64_t i) const { return (i - 1) * static_cast<std::uint64_t>(r) * w + 1; }
};

PathSampler sampler_from(const HistoryContext& ctx, QlssMode mode);
PathSampler sampler_from(const EmHistoryContext& ctx, const SdeProblem& p, QlssMode mode);
/// Exact propagators and covariance roots on t_n = n T / r; no clipping.
PathSampler exact_sampler(const SdeProblem& p, int r, int R, const PcgStream& stream);
/// Euler-Maruyama recursion on r steps; no clipping.
PathSampler em_sampler(const SdeProblem& p, int r, const PcgStream& stream);

/// Direct sample average Y_hat and the rescaled-frame overlap over samples first .. first + n - 1.
/// With tail > 0 each sample contributes the average over slots r .. r + tail (terminal mode).
struct SampleSums {
  double y_hat = 0.0;
  double overlap = 0.0;
};
SampleSums sample_sums(const PathSampler& s, const ObservableTensor::Resolved& C, int tail, double prefactor,
                       std::uint64_t first, std::uint64_t n);
/// Serial reference for sample_sums; bitwise identical results.
SampleSums sample_sums_serial(const PathSampler& s, const ObservableTensor::Resolved& C, int tail, double prefactor,
                              std::uint64_t first, std::uint64_t n);

/// Dense |histSP>: per sample (prefactor x)^{(x)d} on flag 0, remaining mass on flag 1.
Vec build_history_superposition(const std::vector<Vec>& raw, double prefactor, int d);

// ---- estimators ----

struct EstimateOptions {
  OverlapMode overlap = OverlapMode::shot;
  QlssMode qlss = QlssMode::honest;
  std::uint64_t seed = 20240601ULL;
  std::uint64_t stream_id = 7;
  int repeats = 1;
  bool verify_first_sample = true;
};

struct EstimateReport {
  EstimationPlan plan;
  QueryLedger ledger;
  int M_emu = 0;
  std::vector<double> mu_hat;   ///< one per repeat
  std::vector<double> y_hat;    ///< direct sample averages, one per repeat
  double truth = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> abs_error;
  int within_eps = 0;
  bool history_verified = false;
  double history_deviation = 0.0, history_bound = 0.0;
  nlohmann::json to_json() const;
};

EstimateReport estimate_multi_time(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                                   const EstimateOptions& opt);
EstimateReport estimate_terminal(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                                 const EstimateOptions& opt);
EstimateReport estimate_em(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                           const EstimateOptions& opt);
/// Dispatches on plan.mode.
EstimateReport run_estimate(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                            const EstimateOptions& opt);

// ---- bound validators ----

enum class MomentKind { multi, terminal, em, multi_tilde, em_tilde };
const char* to_string(MomentKind k);

struct MomentReport {
  MomentKind kind = MomentKind::multi;
  int d = 1, r = 0;
  std::uint64_t N_s = 0;
  double estimate = 0.0, std_error = 0.0, bound = 0.0;
  bool pass = false;
};

/// Monte Carlo E||X^{(x)d}||^2 = E||X||^{2d} against its closed-form bound.
/// r <= 0 selects r_c (Dyson kinds) or em_min_steps (EM kinds); eps is the history accuracy of tilde kinds.
MomentReport moment_bound_check(const SdeProblem& p, MomentKind kind, int d, std::uint64_t N_s, int r,
                                const PcgStream& stream, double eps = 0.1);
double moment_bound(const SdeProblem& p, MomentKind kind, int d, int r, double eps);

struct ConcentrationReport {
  EstimatorMode mode = EstimatorMode::dyson_multi;
  int repeats = 0;
  std::uint64_t N_s = 0;
  double delta = 0.0, bound = 0.0, truth = 0.0;
  int violations = 0;
  double frequency = 0.0, allowed = 0.0;
  double max_error = 0.0;
  bool pass = false;
};

/// Repeats Y_hat over disjoint sample blocks of exact-state histories (eps = 0 form of the bound).
/// Dyson modes sample exact propagators with clipping at U_SN; the EM mode samples the EM recursion
/// and adds the discretization term with c_st.
ConcentrationReport sample_average_bound_check(const SdeProblem& p, const ObservableTensor& C, EstimatorMode mode,
                                               double delta, std::uint64_t N_s, int repeats, const PcgStream& stream,
                                               int r = 0, double c_st = 0.0);

/// (2k - 1)!! for k >= 0, as a double; (-1)!! = 1.
double double_factorial_odd(int k);

}  // namespace qsde
