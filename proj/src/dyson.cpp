#include "qsde/dyson.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qsde {

namespace {

constexpr double kE = std::numbers::e;

int ceil_int(double x) { return static_cast<int>(std::ceil(x - 1e-9)); }

// c += a b without temporaries.
void mul_add(const Mat& a, const Mat& b, Mat& c) {
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) c(i, j) += aik * b(k, j);
    }
}

Mat truncated_exp(const Mat& x, int K) {
  const std::size_t N = x.rows();
  Mat sum = Mat::identity(N), term = Mat::identity(N);
  for (int k = 1; k <= K; ++k) {
    Mat next(N, N);
    mul_add(term, x, next);
    next *= 1.0 / k;
    sum += next;
    term = std::move(next);
  }
  return sum;
}

// Degree-<=K part of exp(h A(tau_{M-1})) ... exp(h A(tau_0)), graded by total degree.
Mat dyson_general(const SdeProblem& p, double s, double t1, int M, int K) {
  const std::size_t N = p.N();
  if (K == 0) return Mat::identity(N);
  const double h = (t1 - s) / M;
  std::vector<Mat> Q(K + 1, Mat(N, N)), P(K + 1, Mat(N, N));
  Q[0] = Mat::identity(N);
  P[0] = Mat::identity(N);
  for (int l = 0; l < M; ++l) {
    Mat H = p.A(s + l * h);
    H *= h;
    for (int m = 1; m <= K; ++m) {
      std::fill(P[m].data(), P[m].data() + N * N, 0.0);
      mul_add(H, P[m - 1], P[m]);
      P[m] *= 1.0 / m;
    }
    for (int k = K; k >= 1; --k)
      for (int m = 1; m <= k; ++m) mul_add(P[m], Q[k - m], Q[k]);
  }
  Mat sum = Q[0];
  for (int k = 1; k <= K; ++k) sum += Q[k];
  return sum;
}

Mat dyson_at(const SdeProblem& p, const TimeGrid& grid, int K, int n, int j) {
  const double s = grid.s(n, j), t1 = grid.t(n + 1);
  if (p.autonomous()) {
    Mat x = p.A(s);
    x *= (t1 - s);
    return truncated_exp(x, K);
  }
  return dyson_general(p, s, t1, grid.M, K);
}

void fill_blocks(const SdeProblem& p, DysonBlocks& out, bool parallel) {
  const TimeGrid& g = out.grid;
  const long per = out.j0_only ? 1 : g.M;
  const long count = static_cast<long>(g.r) * per;
  out.phi.assign(count, Mat());
#pragma omp parallel for schedule(dynamic) if (parallel)
  for (long idx = 0; idx < count; ++idx) {
    const int n = static_cast<int>(idx / per), j = static_cast<int>(idx % per);
    out.phi[idx] = dyson_at(p, g, out.K, n, j);
  }
}

void check_nj(const TimeGrid& grid, int K, int n, int j) {
  if (K < 0 || n < 0 || n >= grid.r || j < 0 || j >= grid.M) throw InvalidInput("truncated_dyson: index out of range");
}

void require_dyson_mode(const SdeProblem& p) {
  if (!p.full_rank_noise() || !(p.bounds().sigma > 0.0))
    throw BoundViolation("noise covariance is not declared full rank; the Dyson method needs kappa_BBT >= 1");
}

int ancillas_phi(int K, int M) {
  return K * (1 + static_cast<int>(std::ceil(std::log2(std::max(2, M)))) +
              static_cast<int>(std::ceil(std::log2(std::max(2, K)))));
}

}  // namespace

BlockEncodingSpec be_product(const BlockEncodingSpec& a, const BlockEncodingSpec& b) {
  if (a.target.cols() != b.target.rows()) throw InvalidInput("be_product: inner dimensions differ");
  BlockEncodingSpec out;
  out.target = matmul(a.target, b.target);
  out.alpha = a.alpha * b.alpha;
  out.ancillas = a.ancillas + b.ancillas;
  out.epsilon = a.alpha * b.epsilon + b.alpha * a.epsilon + a.epsilon * b.epsilon;
  return out;
}

BlockEncodingSpec be_lcu_average(const std::vector<BlockEncodingSpec>& specs, double weight) {
  if (specs.empty()) throw InvalidInput("be_lcu_average: empty list");
  BlockEncodingSpec out;
  out.target = Mat(specs[0].target.rows(), specs[0].target.cols());
  double amax = 0.0;
  int amax_anc = 0;
  for (const auto& s : specs) {
    if (s.target.rows() != out.target.rows() || s.target.cols() != out.target.cols())
      throw InvalidInput("be_lcu_average: dimensions differ");
    out.target += weight * s.target;
    amax = std::max(amax, s.alpha);
    amax_anc = std::max(amax_anc, s.ancillas);
    out.epsilon += weight * s.epsilon;
  }
  out.alpha = static_cast<double>(specs.size()) * weight * amax;
  out.ancillas = amax_anc + static_cast<int>(std::ceil(std::log2(static_cast<double>(specs.size()))));
  return out;
}

Mat truncated_dyson(const SdeProblem& p, const TimeGrid& grid, int K, int n, int j) {
  check_nj(grid, K, n, j);
  return dyson_at(p, grid, K, n, j);
}

DysonBlocks dyson_blocks(const SdeProblem& p, const TimeGrid& grid, int K, bool j0_only) {
  DysonBlocks out{grid, K, j0_only, {}};
  fill_blocks(p, out, true);
  return out;
}

DysonBlocks dyson_blocks_serial(const SdeProblem& p, const TimeGrid& grid, int K, bool j0_only) {
  DysonBlocks out{grid, K, j0_only, {}};
  fill_blocks(p, out, false);
  return out;
}

// ---------------------------------------------------------------------------
// parameter formulas

KrmChoice choose_krm_phi(const SdeProblem& p, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw InvalidInput("choose_krm_phi needs eps in (0, 1)");
  const Bounds& b = p.bounds();
  KrmChoice c;
  c.K = std::max(ceil_int(std::log(3.0 / eps)), 7);
  c.r = std::max(1, ceil_int(b.alpha_A * p.T()));
  c.M = std::max(1.0, std::ceil(4.0 * b.alpha_dA / (b.alpha_A * b.alpha_A * eps) - 1e-9));
  return c;
}

KrmChoice choose_krm_sigma(const SdeProblem& p, double eps, int r) {
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidInput("choose_krm_sigma needs eps in (0, 1]");
  const Bounds& b = p.bounds();
  if (!(b.sigma > 0.0)) throw InvalidInput("choose_krm_sigma needs sigma > 0");
  KrmChoice c;
  c.K = std::max(ceil_int(std::log(18.0 / eps)), 7);
  const int r0 = std::max(1, ceil_int(b.alpha_A * p.T()));
  if (r > 0 && r < r0) throw InvalidInput("choose_krm_sigma: r below alpha_A T");
  c.r = r > 0 ? r : r0;
  const double dt = p.T() / c.r;
  const double m1 = 24.0 * b.alpha_dA / (b.alpha_A * b.alpha_A * eps);
  const double m2 = 2.0 * (2.0 * b.alpha_A + b.alpha_dBBT / (b.sigma * b.sigma)) * dt / eps;
  c.M = std::max(1.0, std::ceil(std::max(m1, m2) - 1e-9));
  return c;
}

double sqrt_poly_factor(double kappa, double eps) {
  const double l8 = std::log(8.0 / eps);
  const double g = std::log2(4.0 * kappa * l8) + 1.0;
  return g * g * l8;
}

KrmChoice choose_krm_sqrt(const SdeProblem& p, double eps) {
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidInput("choose_krm_sqrt needs eps in (0, 1]");
  require_dyson_mode(p);
  const Bounds& b = p.bounds();
  const double F = sqrt_poly_factor(b.kappa_BBT, eps);
  KrmChoice c;
  c.K = std::max(ceil_int(std::log(1152.0 * std::numbers::pi * F / eps)), 7);
  c.r = std::max(1, ceil_int(4.0 * b.kappa_BBT * b.alpha_A * p.T()));
  const double f1 = 24.0 * b.alpha_dA / (b.alpha_A * b.alpha_A);
  const double f2 = 2.0 * (2.0 * b.alpha_A + b.alpha_dBBT / (b.sigma * b.sigma)) / b.alpha_A;
  c.M = std::max(1.0, std::ceil(std::max(f1, f2) * 64.0 * std::numbers::pi * F / eps - 1e-9));
  return c;
}

// ---------------------------------------------------------------------------
// checks

ErrorCheckReport dyson_error_bound_check(const SdeProblem& p, double eps, int k_offset) {
  KrmChoice c = choose_krm_phi(p, eps);
  if (c.M > static_cast<double>(1 << 22)) throw Infeasible("dyson_error_bound_check: fine grid too large");
  ErrorCheckReport rep;
  rep.model = p.name();
  rep.eps_target = eps;
  rep.K = std::max(0, c.K + k_offset);
  rep.r = c.r;
  rep.M = c.M;
  rep.bound = eps;
  TimeGrid grid(p.T(), c.r, static_cast<int>(c.M));
  std::vector<int> js;
  if (grid.M <= 257) {
    for (int j = 0; j < grid.M; ++j) js.push_back(j);
  } else {
    for (int k = 0; k <= 256; ++k) js.push_back(static_cast<int>(std::llround(k * (grid.M - 1.0) / 256.0)));
  }
  const long per = static_cast<long>(js.size()), count = per * grid.r;
  std::vector<double> err(count);
#pragma omp parallel for schedule(dynamic)
  for (long idx = 0; idx < count; ++idx) {
    const int n = static_cast<int>(idx / per), j = js[idx % per];
    Mat d = truncated_dyson(p, grid, rep.K, n, j) - exact_phi(p, grid.s(n, j), grid.t(n + 1));
    err[idx] = spectral_norm(d);
  }
  for (double e : err) rep.measured_error = std::max(rep.measured_error, e);
  rep.pass = rep.measured_error <= rep.bound;
  return rep;
}

Mat approx_covariance(const SdeProblem& p, const TimeGrid& grid, int K, int n) {
  if (n < 0 || n >= grid.r) throw InvalidInput("approx_covariance: step out of range");
  const std::size_t N = p.N();
  Mat acc(N, N);
  for (int j = 0; j < grid.M; ++j) {
    Mat pb = matmul_serial(dyson_at(p, grid, K, n, j), p.B(grid.s(n, j)));
    Mat term(N, N);
    mul_add(pb, pb.transpose(), term);
    term *= grid.dt_fine;
    acc += term;
  }
  return acc;
}

Mat approx_covariance(const SdeProblem& p, const DysonBlocks& blocks, int n) {
  if (blocks.j0_only) throw InvalidInput("approx_covariance needs blocks for every fine step");
  const TimeGrid& grid = blocks.grid;
  if (n < 0 || n >= grid.r) throw InvalidInput("approx_covariance: step out of range");
  const std::size_t N = p.N();
  Mat acc(N, N);
  for (int j = 0; j < grid.M; ++j) {
    Mat pb = matmul_serial(blocks.at(n, j), p.B(grid.s(n, j)));
    Mat term(N, N);
    mul_add(pb, pb.transpose(), term);
    term *= grid.dt_fine;
    acc += term;
  }
  return acc;
}

ErrorCheckReport covariance_error_check(const SdeProblem& p, double eps, int r) {
  KrmChoice c = choose_krm_sigma(p, eps, r);
  if (c.M > static_cast<double>(1 << 20)) throw Infeasible("covariance_error_check: fine grid too large");
  ErrorCheckReport rep;
  rep.model = p.name();
  rep.eps_target = eps;
  rep.K = c.K;
  rep.r = c.r;
  rep.M = c.M;
  TimeGrid grid(p.T(), c.r, static_cast<int>(c.M));
  rep.bound = eps * p.bounds().sigma * p.bounds().sigma * grid.dt;
  std::vector<double> err(grid.r);
#pragma omp parallel for schedule(dynamic)
  for (int n = 0; n < grid.r; ++n) {
    Mat d = approx_covariance(p, grid, c.K, n) - exact_sigma(p, grid.t(n), grid.t(n + 1));
    err[n] = spectral_norm(d);
  }
  for (double e : err) rep.measured_error = std::max(rep.measured_error, e);
  rep.pass = rep.measured_error <= rep.bound;
  return rep;
}

ContainmentReport covariance_containment(const Mat& cov, const SdeProblem& p, double dt, double slack) {
  require_dyson_mode(p);
  const double s2dt = p.bounds().sigma * p.bounds().sigma * dt;
  Vec ev = sym_eig(cov).values;
  ContainmentReport rep;
  rep.min_eig = ev.front();
  rep.max_eig = ev.back();
  rep.lower = s2dt / (2.0 * p.bounds().kappa_BBT);
  rep.upper = s2dt;
  rep.pass = rep.min_eig >= rep.lower - slack && rep.max_eig <= rep.upper + slack;
  return rep;
}

SqrtResult sqrt_with_budget(const Mat& cov, const SdeProblem& p, const TimeGrid& grid, double eps, double slack) {
  ContainmentReport c = covariance_containment(cov, p, grid.dt, slack);
  if (!c.pass)
    throw BoundViolation("covariance eigenvalues [" + std::to_string(c.min_eig) + ", " + std::to_string(c.max_eig) +
                         "] leave the admissible range [" + std::to_string(c.lower) + ", " + std::to_string(c.upper) +
                         "]");
  const double s2dt = p.bounds().sigma * p.bounds().sigma * grid.dt;
  SqrtResult out;
  out.S = sqrt_psd(cov, 1e-9 * std::max(1.0, s2dt));
  out.min_eig = c.min_eig;
  out.max_eig = c.max_eig;
  out.spec.target = out.S;
  out.spec.alpha = 2.0 * std::sqrt(s2dt);
  out.spec.epsilon = eps * std::sqrt(s2dt);
  out.spec.ancillas = 1;
  return out;
}

CovApprox build_cov_approx(const SdeProblem& p, const DysonBlocks& blocks, const CovBuildOptions& opt) {
  require_dyson_mode(p);
  CovApprox out;
  out.grid = blocks.grid;
  out.K = blocks.K;
  const TimeGrid& g = blocks.grid;
  const std::size_t N = p.N();
  const double s2 = p.bounds().sigma * p.bounds().sigma;
  out.sigma_tilde.resize(g.r);
  out.s_tilde.resize(g.r);
  std::vector<SqrtResult> roots(g.r);
#pragma omp parallel for schedule(dynamic)
  for (int n = 0; n < g.r; ++n) out.sigma_tilde[n] = approx_covariance(p, blocks, n);
  for (int n = 0; n < g.r; ++n) {
    roots[n] = sqrt_with_budget(out.sigma_tilde[n], p, g, opt.sqrt_eps, opt.sigma_slack);
    out.s_tilde[n] = roots[n].S;
    if (opt.perturb_sqrt && opt.sqrt_eps > 0.0) {
      Mat e(N, N);
      Vec z(N * N);
      fill_normals(opt.stream, 1 + static_cast<std::uint64_t>(n) * N * N, N * N, z.data());
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j <= i; ++j) e(i, j) = e(j, i) = z[i * N + j];
      const double nrm = spectral_norm(e);
      if (nrm > 0.0) {
        e *= opt.sqrt_eps * std::sqrt(s2 * g.dt) / nrm;
        out.s_tilde[n] += e;
      }
    }
  }
  const int a_phi = ancillas_phi(blocks.K, g.M);
  out.be_sigma.target = out.sigma_tilde.empty() ? Mat() : out.sigma_tilde[0];
  out.be_sigma.alpha = kE * kE * s2 * g.dt;
  out.be_sigma.ancillas = 2 * a_phi + 1 + static_cast<int>(std::ceil(std::log2(static_cast<double>(g.M))));
  out.be_sigma.epsilon = 0.0;
  out.be_sqrt.target = out.s_tilde.empty() ? Mat() : out.s_tilde[0];
  out.be_sqrt.alpha = 2.0 * std::sqrt(s2 * g.dt);
  out.be_sqrt.ancillas = out.be_sigma.ancillas + 1;
  out.be_sqrt.epsilon = opt.sqrt_eps * std::sqrt(s2 * g.dt);
  return out;
}

Vec noise_sample(const CovApprox& cov, const PcgStream& stream, std::uint64_t i, int n, ClipBound clip_bound) {
  const Mat& S = cov.s_tilde.at(n);
  Vec z = noise_vector(stream, i, n, static_cast<int>(S.cols()), cov.grid.r);
  for (double& v : z) v = clip(v, clip_bound);
  return matvec(S, z);
}

double noise_state_normalization(const SdeProblem& p, double dt, ClipBound clip_bound) {
  return 1.0 / (2.0 * std::sqrt(p.N() * p.bounds().sigma * p.bounds().sigma * dt) * clip_bound.U_SN);
}

}  // namespace qsde
