#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qsde/linalg.hpp"
#include "qsde/model.hpp"
#include "qsde/prng.hpp"

namespace qsde {

/// Classical stand-in for an (alpha, ancillas, epsilon)-block-encoding of `target`.
struct BlockEncodingSpec {
  Mat target;
  double alpha = 1.0;
  int ancillas = 0;
  double epsilon = 0.0;
};

BlockEncodingSpec be_product(const BlockEncodingSpec& a, const BlockEncodingSpec& b);
/// Uniform-weight linear combination: target = sum_j weight * target_j.
BlockEncodingSpec be_lcu_average(const std::vector<BlockEncodingSpec>& specs, double weight);

/// Truncated time-ordered Dyson series on the fine grid behind s_{n,j}.
Mat truncated_dyson(const SdeProblem& p, const TimeGrid& grid, int K, int n, int j);

/// Truncated Dyson blocks for all (n, j), or only j = 0. Layout n * M + j.
struct DysonBlocks {
  TimeGrid grid;
  int K = 0;
  bool j0_only = false;
  std::vector<Mat> phi;
  const Mat& at(int n, int j) const { return phi[j0_only ? n : static_cast<std::size_t>(n) * grid.M + j]; }
};
DysonBlocks dyson_blocks(const SdeProblem& p, const TimeGrid& grid, int K, bool j0_only);
/// Serial reference for dyson_blocks.
DysonBlocks dyson_blocks_serial(const SdeProblem& p, const TimeGrid& grid, int K, bool j0_only);

struct KrmChoice {
  int K = 0;
  int r = 0;
  double M = 1;  ///< may be astronomically large for the combined formulas
};

/// Smallest integers with K >= max{log(3/eps), 7}, r >= alpha_A T, M >= 4 alpha_dA / (alpha_A^2 eps).
KrmChoice choose_krm_phi(const SdeProblem& p, double eps);
/// Covariance variant; r <= 0 selects the smallest admissible r.
KrmChoice choose_krm_sigma(const SdeProblem& p, double eps, int r = 0);
/// Square-root variant with r_c = ceil(4 kappa alpha_A T).
KrmChoice choose_krm_sqrt(const SdeProblem& p, double eps);
/// (lg(4 kappa log(8/eps)) + 1)^2 log(8/eps).
double sqrt_poly_factor(double kappa, double eps);

struct ErrorCheckReport {
  std::string model;
  double eps_target = 0.0;
  int K = 0, r = 0;
  double M = 1;
  double measured_error = 0.0;
  double bound = 0.0;
  bool pass = false;
};

/// max over (n, j) of ||Phi~ - Phi||. Large fine grids are checked on an evenly spaced subset of j.
ErrorCheckReport dyson_error_bound_check(const SdeProblem& p, double eps, int k_offset = 0);

/// sum_j Phi~_{n,j} B B^T(s_{n,j}) Phi~_{n,j}^T dt_fine.
Mat approx_covariance(const SdeProblem& p, const TimeGrid& grid, int K, int n);
Mat approx_covariance(const SdeProblem& p, const DysonBlocks& blocks, int n);

/// max_n ||Sigma~_n - Sigma_n|| against eps sigma^2 dt.
ErrorCheckReport covariance_error_check(const SdeProblem& p, double eps, int r = 0);

struct SqrtResult {
  Mat S;
  BlockEncodingSpec spec;
  double min_eig = 0.0, max_eig = 0.0;
};

/// Root of an approximate covariance with its emulated block-encoding budget.
/// Throws BoundViolation when eigenvalues leave [sigma^2 dt/(2 kappa), sigma^2 dt] by more than `slack`.
SqrtResult sqrt_with_budget(const Mat& cov, const SdeProblem& p, const TimeGrid& grid, double eps,
                            double slack = 1e-10);

/// Eigenvalue containment of a covariance block, with absolute slack.
struct ContainmentReport {
  double min_eig = 0.0, max_eig = 0.0, lower = 0.0, upper = 0.0;
  bool pass = false;
};
ContainmentReport covariance_containment(const Mat& cov, const SdeProblem& p, double dt, double slack = 1e-10);

/// Per-step approximate covariances and their roots.
struct CovApprox {
  TimeGrid grid;
  int K = 0;
  std::vector<Mat> sigma_tilde;
  std::vector<Mat> s_tilde;
  BlockEncodingSpec be_sigma;
  BlockEncodingSpec be_sqrt;
};

struct CovBuildOptions {
  double sqrt_eps = 0.0;        ///< budget eps for ||S~ - S|| <= eps sqrt(sigma^2 dt)
  double sigma_slack = 1e-10;   ///< eigenvalue slack for the containment check
  bool perturb_sqrt = false;    ///< add a symmetric perturbation of norm exactly the budget
  PcgStream stream{};
};

CovApprox build_cov_approx(const SdeProblem& p, const DysonBlocks& blocks, const CovBuildOptions& opt);

/// Delta~_n = S~_n clip(z_n) for sample i.
Vec noise_sample(const CovApprox& cov, const PcgStream& stream, std::uint64_t i, int n, ClipBound clip_bound);

/// 1 / (2 sqrt(N sigma^2 dt) U_SN), the amplitude normalization of the noise state.
double noise_state_normalization(const SdeProblem& p, double dt, ClipBound clip_bound);

}  // namespace qsde
