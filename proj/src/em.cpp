#include "qsde/em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qsde {

namespace {

constexpr std::uint64_t kEmQlssSalt = 0x94d049bb133111ebULL;

Vec step(const Mat& A, const Vec& x, double dt, const Vec& incr) {
  Vec out = x;
  Vec ax = matvec(A, x);
  axpy(dt, ax, out);
  axpy(1.0, incr, out);
  return out;
}

}  // namespace

std::vector<Vec> em_noise(const SdeProblem& p, const TimeGrid& grid, const PcgStream& stream, std::uint64_t i,
                          ClipBound clip_bound) {
  std::vector<Vec> out(grid.r);
  const double sq = std::sqrt(grid.dt);
  for (int n = 0; n < grid.r; ++n) {
    Vec z = noise_vector(stream, i, n, p.m(), grid.r);
    for (double& v : z) v = clip(v, clip_bound) * sq;
    out[n] = matvec(p.B(grid.t(n)), z);
  }
  return out;
}

EmTrajectory em_trajectory(const SdeProblem& p, const TimeGrid& grid, const PcgStream& stream, std::uint64_t i,
                           ClipBound clip_bound) {
  EmTrajectory tr;
  tr.grid = grid;
  tr.noise = em_noise(p, grid, stream, i, clip_bound);
  tr.states.reserve(grid.r + 1);
  tr.states.push_back(p.x0());
  for (int n = 0; n < grid.r; ++n) tr.states.push_back(step(p.A(grid.t(n)), tr.states.back(), grid.dt, tr.noise[n]));
  return tr;
}

int em_min_steps(const SdeProblem& p) {
  const Bounds& b = p.bounds();
  return std::max(1, static_cast<int>(std::ceil(4.0 * b.alpha_A * b.alpha_A * p.T() / b.eta - 1e-9)));
}

HistorySystem assemble_em_system(const SdeProblem& p, const TimeGrid& grid) {
  std::vector<Mat> blocks(grid.r);
  for (int n = 0; n < grid.r; ++n) {
    Mat a = p.A(grid.t(n));
    a *= grid.dt;
    blocks[n] = Mat::identity(p.N()) + a;
  }
  return assemble(SystemKind::em, std::move(blocks), 0);
}

EmNormReport em_norm_report(const SdeProblem& p, const TimeGrid& grid) {
  EmNormReport rep;
  const Bounds& b = p.bounds();
  const double mx = p.max_eta_T();
  rep.bound_inv = 4.0 * grid.r / mx;
  rep.bound_cond = 12.0 * grid.r / mx;
  rep.step_bound = 1.0 - b.eta * grid.dt / 4.0;
  if (grid.dt > b.eta / (4.0 * b.alpha_A * b.alpha_A) * (1.0 + 1e-12)) {
    rep.reason = "step size exceeds eta / (4 alpha_A^2)";
    return rep;
  }
  if (p.N() * static_cast<std::size_t>(grid.r + 1) > 4096) {
    rep.reason = "system too large to materialize";
    return rep;
  }
  rep.applicable = true;
  HistorySystem sys = assemble_em_system(p, grid);
  for (const auto& blk : sys.blocks) rep.max_step_norm = std::max(rep.max_step_norm, spectral_norm(blk));
  Vec sv = singular_values(sys.dense());
  rep.norm_A = sv.front();
  rep.norm_inv = 1.0 / sv.back();
  rep.cond = rep.norm_A * rep.norm_inv;
  rep.pass = rep.norm_A <= rep.bound_A && rep.norm_inv <= rep.bound_inv && rep.cond <= rep.bound_cond &&
             rep.max_step_norm <= rep.step_bound + 1e-12;
  return rep;
}

StrongConvergenceReport strong_convergence(const SdeProblem& p, const std::vector<int>& r_list, int paths,
                                           const PcgStream& stream) {
  if (r_list.size() < 2 || paths < 1) throw InvalidInput("strong_convergence needs two step counts and one path");
  StrongConvergenceReport rep;
  rep.r_list = r_list;
  rep.paths = paths;
  const int rmax = *std::max_element(r_list.begin(), r_list.end());
  rep.r_fine = 64 * rmax;
  for (int r : r_list)
    if (r < 1 || rep.r_fine % r != 0) throw InvalidInput("step counts must divide 64 * max(r)");
  const TimeGrid fine(p.T(), rep.r_fine);
  const std::size_t N = p.N(), m = p.m();
  std::vector<Mat> Af(rep.r_fine), Bf(rep.r_fine);
  for (int k = 0; k < rep.r_fine; ++k) {
    Af[k] = p.A(fine.t(k));
    Bf[k] = p.B(fine.t(k));
  }
  const std::size_t nr = r_list.size();
  // sq[path][ri][n]
  std::vector<std::vector<std::vector<double>>> sq(paths, std::vector<std::vector<double>>(nr));
  const double sdt = std::sqrt(fine.dt);
#pragma omp parallel for schedule(dynamic)
  for (int path = 0; path < paths; ++path) {
    Vec z(static_cast<std::size_t>(rep.r_fine) * m);
    fill_normals(stream, 1 + static_cast<std::uint64_t>(path) * z.size(), z.size(), z.data());
    std::vector<Vec> ref(rep.r_fine + 1);
    ref[0] = p.x0();
    for (int k = 0; k < rep.r_fine; ++k) {
      Vec dw(z.begin() + k * m, z.begin() + (k + 1) * m);
      for (double& v : dw) v *= sdt;
      ref[k + 1] = step(Af[k], ref[k], fine.dt, matvec(Bf[k], dw));
    }
    for (std::size_t ri = 0; ri < nr; ++ri) {
      const int r = r_list[ri], ratio = rep.r_fine / r;
      const double dt = p.T() / r;
      std::vector<double>& out = sq[path][ri];
      out.assign(r + 1, 0.0);
      Vec x = p.x0();
      for (int n = 0; n < r; ++n) {
        Vec dw(m, 0.0);
        for (int k = n * ratio; k < (n + 1) * ratio; ++k)
          for (std::size_t c = 0; c < m; ++c) dw[c] += sdt * z[k * m + c];
        x = step(Af[n * ratio], x, dt, matvec(Bf[n * ratio], dw));
        double s = 0.0;
        for (std::size_t c = 0; c < N; ++c) {
          const double d = x[c] - ref[(n + 1) * ratio][c];
          s += d * d;
        }
        out[n + 1] = s;
      }
    }
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t ri = 0; ri < nr; ++ri) {
    const int r = r_list[ri];
    double worst = 0.0;
    for (int n = 0; n <= r; ++n) {
      double mean = 0.0;
      for (int path = 0; path < paths; ++path) mean += sq[path][ri][n];
      worst = std::max(worst, mean / paths);
    }
    rep.rms_error.push_back(std::sqrt(worst));
    rep.c_st = std::max(rep.c_st, static_cast<double>(r) * r * worst);
    const double lx = std::log(static_cast<double>(r)), ly = std::log(std::sqrt(worst));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double k = static_cast<double>(nr);
  rep.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  return rep;
}

EmHistoryContext::EmHistoryContext(const SdeProblem& p, int r, double eps, double U_SN, const PcgStream& stream)
    : p_(p), grid_(p.T(), r), eps_(eps), U_SN_(U_SN), stream_(stream) {
  if (r < em_min_steps(p)) throw InvalidInput("EM history state needs r >= ceil(4 alpha_A^2 T / eta)");
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidInput("EM history accuracy eps must lie in (0, 1]");
  if (!(U_SN > 0.0)) throw InvalidInput("clip level must be positive");
  const double s2 = p.bounds().sigma * p.bounds().sigma;
  U_B_ = std::sqrt(dot(p.x0(), p.x0()) + p.m() * s2 * p.T() * U_SN * U_SN);
  const double mx = p.max_eta_T();
  prefactor_ = mx / (8.0 * r * U_B_);
  qlss_eps_ = mx * eps / (8.0 * r);
  sys_ = assemble_em_system(p, grid_);
}

Vec EmHistoryContext::rhs(std::uint64_t i) const {
  return assemble_rhs(p_.x0(), em_noise(p_, grid_, stream_, i, clip_bound()), 0);
}

QlssModel EmHistoryContext::qlss(std::uint64_t i, QlssMode mode) const {
  QlssModel q;
  q.mode = mode;
  q.inv_error = eps_;  // ||C - A_EM^{-1}|| <= eps unscaled
  q.stream = PcgStream(stream_.seed, stream_.stream_id ^ kEmQlssSalt);
  q.index = i;
  return q;
}

HistoryState EmHistoryContext::state(std::uint64_t i, QlssMode mode) const {
  HistoryState st = solve(sys_, rhs(i), qlss(i, mode));
  st.prefactor = prefactor_;
  st.U_B = U_B_;
  st.qlss_eps = qlss_eps_;
  return st;
}

EmHistoryCheck EmHistoryContext::verify(std::uint64_t i, QlssMode mode) const {
  EmHistoryCheck c;
  EmTrajectory tr = em_trajectory(p_, grid_, stream_, i, clip_bound());
  HistoryState st = state(i, mode);
  double s = 0.0;
  for (int n = 0; n <= grid_.r; ++n)
    for (int k = 0; k < p_.N(); ++k) {
      const double d = st.raw[n * p_.N() + k] - tr.states[n][k];
      s += d * d;
    }
  c.deviation = std::sqrt(s);
  c.U_B = U_B_;
  c.bound = U_B_ * eps_;
  c.rhs_norm = norm2(rhs(i));
  c.amplitude_mass = st.amplitude_mass();
  return c;
}

HistoryState em_history_state(const SdeProblem& p, int r, const PcgStream& stream, std::uint64_t i, double eps,
                              double U_SN, QlssMode mode) {
  EmHistoryContext ctx(p, r, eps, U_SN, stream);
  EmHistoryCheck c = ctx.verify(i, mode);
  if (!c.pass())
    throw BoundViolation("EM history deviation " + std::to_string(c.deviation) + " exceeds U_B eps = " +
                         std::to_string(c.bound));
  return ctx.state(i, mode);
}

}  // namespace qsde
