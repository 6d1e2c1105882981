#include "qsde/history.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace qsde {

namespace {

constexpr std::uint64_t kQlssStreamSalt = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kSqrtStreamSalt = 0xc2b2ae3d27d4eb4fULL;

void check_blocks(const std::vector<Mat>& blocks) {
  if (blocks.empty()) throw InvalidInput("history system needs r >= 1 blocks");
  const std::size_t N = blocks[0].rows();
  for (const auto& b : blocks)
    if (!b.square() || b.rows() != N) throw InvalidInput("history blocks must be square and of equal size");
}

}  // namespace

Mat HistorySystem::dense() const {
  const std::size_t D = dim();
  if (D > 4096) throw InvalidInput("history system too large to materialize (" + std::to_string(D) + " rows)");
  Mat a = Mat::identity(D);
  for (int n = 0; n < r + R; ++n) {
    Mat sub = n < r ? blocks[n] : Mat::identity(N);
    sub *= -1.0;
    a.set_block((n + 1) * N, n * N, sub);
  }
  return a;
}

HistorySystem assemble(SystemKind kind, std::vector<Mat> blocks, int R) {
  check_blocks(blocks);
  if (R < 0) throw InvalidInput("padding R must be non-negative");
  HistorySystem s;
  s.kind = kind;
  s.r = static_cast<int>(blocks.size());
  s.R = R;
  s.N = blocks[0].rows();
  s.blocks = std::move(blocks);
  return s;
}

Vec assemble_rhs(const Vec& x0, const std::vector<Vec>& noise, int R) {
  const std::size_t N = x0.size();
  Vec b;
  b.reserve(N * (noise.size() + R + 1));
  b.insert(b.end(), x0.begin(), x0.end());
  for (const auto& d : noise) {
    if (d.size() != N) throw InvalidInput("noise block has wrong length");
    b.insert(b.end(), d.begin(), d.end());
  }
  b.resize(N * (noise.size() + R + 1), 0.0);
  return b;
}

Mat inverse_block(const HistorySystem& sys, int n, int np) {
  const int last = sys.r + sys.R;
  if (n < 0 || np < 0 || n > last || np > last) throw InvalidInput("inverse_block: index out of range");
  if (n < np) return Mat(sys.N, sys.N);
  if (n == np || np >= sys.r) return Mat::identity(sys.N);
  const int top = std::min(n, sys.r);
  Mat acc = Mat::identity(sys.N);
  for (int k = np; k < top; ++k) acc = matmul(sys.blocks[k], acc);
  return acc;
}

Vec forward_solve(const HistorySystem& sys, const Vec& b) {
  if (b.size() != sys.dim()) throw InvalidInput("forward_solve: right-hand side has wrong length");
  const std::size_t N = sys.N;
  Vec x(b.size());
  std::copy(b.begin(), b.begin() + N, x.begin());
  for (int n = 0; n < sys.r + sys.R; ++n) {
    const double* prev = x.data() + n * N;
    double* cur = x.data() + (n + 1) * N;
    const double* rhs = b.data() + (n + 1) * N;
    if (n < sys.r) {
      const Mat& P = sys.blocks[n];
      for (std::size_t i = 0; i < N; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < N; ++k) s += P(i, k) * prev[k];
        cur[i] = s + rhs[i];
      }
    } else {
      for (std::size_t i = 0; i < N; ++i) cur[i] = prev[i] + rhs[i];
    }
  }
  return x;
}

QlssMode parse_qlss_mode(const std::string& s) {
  if (s == "honest") return QlssMode::honest;
  if (s == "adversarial") return QlssMode::adversarial;
  throw ConfigError("unknown QLSS mode '" + s + "' (expected honest or adversarial)");
}

const char* to_string(QlssMode m) { return m == QlssMode::honest ? "honest" : "adversarial"; }

Vec HistoryState::block(int n) const {
  if (n < 0 || n > r + R) throw InvalidInput("history block index out of range");
  return Vec(raw.begin() + n * N, raw.begin() + (n + 1) * N);
}

HistoryState solve(const HistorySystem& sys, const Vec& b, const QlssModel& q) {
  if (q.inv_error < 0.0) throw InvalidInput("inversion error must be non-negative");
  HistoryState st;
  st.raw = forward_solve(sys, b);
  st.r = sys.r;
  st.R = sys.R;
  st.N = sys.N;
  if (q.mode == QlssMode::adversarial && q.inv_error > 0.0) {
    const std::size_t D = st.raw.size();
    Vec dir(D);
    fill_normals(q.stream, 1 + (q.index - 1) * D, D, dir.data());
    const double nd = norm2(dir);
    if (nd > 0.0) axpy(q.inv_error * norm2(b) / nd, dir, st.raw);
  }
  return st;
}

NormBoundReport norm_bound_report(const HistorySystem& sys, const SdeProblem& p, bool exact_blocks) {
  Mat a = sys.dense();
  Vec sv = singular_values(a);
  NormBoundReport rep;
  rep.norm_A = sv.front();
  rep.norm_inv = 1.0 / sv.back();
  rep.cond = rep.norm_A * rep.norm_inv;
  const double mx = std::max(1.0, p.bounds().eta * p.T());
  rep.bound_inv = (exact_blocks ? 2.0 : 4.0) * sys.r / mx + sys.R;
  rep.pass = rep.norm_inv <= rep.bound_inv;
  return rep;
}

std::vector<Mat> exact_phi_blocks(const SdeProblem& p, const TimeGrid& grid) {
  std::vector<Mat> out(grid.r);
#pragma omp parallel for schedule(dynamic)
  for (int n = 0; n < grid.r; ++n) out[n] = exact_phi(p, grid.t(n), grid.t(n + 1));
  return out;
}

// ---------------------------------------------------------------------------

HistoryContext::HistoryContext(const SdeProblem& p, const HistoryOptions& opt) : p_(p), opt_(opt) {
  if (!(opt.eps > 0.0 && opt.eps <= 1.0)) throw InvalidInput("history accuracy eps must lie in (0, 1]");
  if (!p.full_rank_noise())
    throw BoundViolation("noise covariance is not declared full rank; the Dyson method needs kappa_BBT >= 1");
  const Bounds& b = p.bounds();
  const double T = p.T(), mx = p.max_eta_T(), s2 = b.sigma * b.sigma, N = p.N();
  const double x0sq = dot(p.x0(), p.x0());

  plan_.r_c = std::max(1, static_cast<int>(std::ceil(4.0 * b.kappa_BBT * b.alpha_A * T - 1e-9)));
  plan_.dt = T / plan_.r_c;
  plan_.U_SN = opt.U_SN > 0.0 ? opt.U_SN : choose_usn(plan_.r_c, N, opt.N_s, opt.delta).U_SN;
  const double noise_part = 4.0 * N * s2 * T * plan_.U_SN * plan_.U_SN;
  plan_.U_B = std::sqrt(x0sq + noise_part);
  if (opt.varepsilon > 0.0) {
    plan_.varepsilon = opt.varepsilon;
  } else {
    const double a1 = b.eta * b.eta * T * T * opt.eps / (32.0 * std::sqrt(6.0) * plan_.r_c * plan_.r_c);
    const double a2 = std::sqrt((x0sq + noise_part) / (384.0 * N * s2 * T * plan_.U_SN * plan_.U_SN)) *
                      (b.eta * T / plan_.r_c) * opt.eps;
    plan_.varepsilon = std::min(a1, a2);
  }
  KrmChoice krm = choose_krm_sqrt(p, std::min(plan_.varepsilon, 1.0));
  plan_.K_c = krm.K;
  plan_.M_c = krm.M;

  // fine grid actually emulated: enough for the accuracy targets, capped for desk-scale cost
  plan_.sigma_budget = plan_.varepsilon / std::sqrt(2.0 * b.kappa_BBT);
  const double a2 = b.alpha_A * b.alpha_A;
  const double m_phi = 4.0 * b.alpha_dA / (a2 * plan_.varepsilon);
  const double m_sig = std::max(24.0 * b.alpha_dA / (a2 * plan_.sigma_budget),
                                2.0 * (2.0 * b.alpha_A + b.alpha_dBBT / s2) * plan_.dt / plan_.sigma_budget);
  const double cap = opt.m_cap > 0 ? opt.m_cap : (p.autonomous() ? (1 << 15) : (1 << 10));
  plan_.M_emu = static_cast<int>(std::max(1.0, std::min({plan_.M_c, std::ceil(std::max(m_phi, m_sig)), cap})));

  plan_.R = opt.padded ? (opt.R >= 0 ? opt.R : static_cast<int>(std::lround(plan_.r_c / mx))) : 0;
  plan_.alpha_A_tilde = 1.0 + std::numbers::e;
  plan_.kappa_A_tilde = opt.padded ? plan_.alpha_A_tilde * (4.0 * plan_.r_c / mx + plan_.R)
                                   : 4.0 * plan_.r_c * plan_.alpha_A_tilde / mx;
  plan_.eps3 = plan_.alpha_A_tilde * opt.eps / (4.0 * plan_.kappa_A_tilde);
  plan_.prefactor = plan_.alpha_A_tilde / (2.0 * plan_.kappa_A_tilde * plan_.U_B);

  grid_ = TimeGrid(T, plan_.r_c, plan_.M_emu);
  stream_ = PcgStream(opt.seed, opt.stream_id);

  std::vector<Mat> phi_hat(grid_.r);
  {
    DysonBlocks blocks = dyson_blocks(p, grid_, plan_.K_c, false);
    CovBuildOptions co;
    co.sqrt_eps = plan_.varepsilon;
    co.sigma_slack = 1e-10 + plan_.sigma_budget * s2 * plan_.dt;
    co.perturb_sqrt = opt.perturb_sqrt;
    co.stream = PcgStream(opt.seed, opt.stream_id ^ kSqrtStreamSalt);
    cov_ = build_cov_approx(p, blocks, co);
    for (int n = 0; n < grid_.r; ++n) phi_hat[n] = blocks.at(n, 0);
  }
  const SystemKind kind = opt.padded ? SystemKind::dyson_padded : SystemKind::dyson;
  sys_ = assemble(kind, std::move(phi_hat), plan_.R);
  exact_sys_ = assemble(kind, exact_phi_blocks(p, grid_), plan_.R);
  exact_S_.resize(grid_.r);
#pragma omp parallel for schedule(dynamic)
  for (int n = 0; n < grid_.r; ++n)
    exact_S_[n] = sqrt_psd(exact_sigma(p, grid_.t(n), grid_.t(n + 1)), 1e-10 * std::max(1.0, s2 * plan_.dt));
}

std::vector<Vec> HistoryContext::approx_noise(std::uint64_t i) const {
  std::vector<Vec> out(grid_.r);
  for (int n = 0; n < grid_.r; ++n) out[n] = noise_sample(cov_, stream_, i, n, clip_bound());
  return out;
}

std::vector<Vec> HistoryContext::exact_noise(std::uint64_t i) const {
  std::vector<Vec> out(grid_.r);
  for (int n = 0; n < grid_.r; ++n) {
    Vec z = noise_vector(stream_, i, n, p_.N(), grid_.r);
    for (double& v : z) v = clip(v, clip_bound());
    out[n] = matvec(exact_S_[n], z);
  }
  return out;
}

QlssModel HistoryContext::qlss(std::uint64_t i, QlssMode mode) const {
  QlssModel q;
  q.mode = mode;
  // unscaled inverse error equivalent to the eps3 budget: (2 kappa / alpha) eps3 = eps / 2
  q.inv_error = 2.0 * plan_.kappa_A_tilde / plan_.alpha_A_tilde * plan_.eps3;
  q.stream = PcgStream(opt_.seed, opt_.stream_id ^ kQlssStreamSalt);
  q.index = i;
  return q;
}

HistoryState HistoryContext::state(std::uint64_t i, QlssMode mode) const {
  Vec b = assemble_rhs(p_.x0(), approx_noise(i), plan_.R);
  HistoryState st = solve(sys_, b, qlss(i, mode));
  st.prefactor = plan_.prefactor;
  st.U_B = plan_.U_B;
  st.qlss_eps = plan_.eps3;
  return st;
}

Vec HistoryContext::reference(std::uint64_t i) const {
  return forward_solve(exact_sys_, assemble_rhs(p_.x0(), exact_noise(i), plan_.R));
}

HistoryCheck HistoryContext::verify(std::uint64_t i, QlssMode mode) const {
  const Bounds& b = p_.bounds();
  const double dt = plan_.dt, T = p_.T(), eps = opt_.eps, U_B = plan_.U_B;
  const std::size_t N = p_.N();
  HistoryCheck c;
  c.sample = i;
  std::vector<Vec> dn = approx_noise(i), en = exact_noise(i);
  Vec rhs = assemble_rhs(p_.x0(), dn, plan_.R);
  HistoryState st = state(i, mode);
  Vec ref = reference(i);

  const int nb = plan_.r_c + plan_.R + 1;
  c.step_errors.resize(nb);
  for (int n = 0; n < nb; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
      const double d = st.raw[n * N + k] - ref[n * N + k];
      s += d * d;
    }
    c.step_errors[n] = std::sqrt(s);
  }
  if (opt_.padded) {
    for (int n = plan_.r_c; n < nb; ++n) c.deviation = std::max(c.deviation, c.step_errors[n]);
  } else {
    double s = 0.0;
    for (double e : c.step_errors) s += e * e;
    c.deviation = std::sqrt(s);
  }
  c.bound = U_B * eps;

  for (int n = 0; n < plan_.r_c; ++n) {
    c.phi_err = std::max(c.phi_err, spectral_norm(sys_.blocks[n] - exact_sys_.blocks[n]));
    Vec diff = dn[n];
    axpy(-1.0, en[n], diff);
    c.delta_err = std::max(c.delta_err, norm2(diff));
    c.delta_max = std::max(c.delta_max, norm2(opt_.padded ? dn[n] : en[n]));
  }
  const double x0n = norm2(p_.x0()), ed = b.eta * dt;
  if (opt_.padded) {
    c.eps1 = ed * U_B * eps / (8.0 * (x0n + 8.0 * c.delta_max / ed));
    c.eps2 = ed * U_B * eps / 16.0;
  } else {
    const double den = x0n * x0n * ed + (T / dt) * c.delta_max * c.delta_max;
    c.eps1 = den > 0.0 ? ed * ed * U_B * eps / (32.0 * std::sqrt(6.0)) / std::sqrt(den)
                       : std::numeric_limits<double>::infinity();
    c.eps2 = std::sqrt(dt * dt * dt / (384.0 * T)) * b.eta * U_B * eps;
  }
  c.phi_limit = std::min(0.5 * ed * std::exp(-ed), c.eps1);
  c.rhs_norm = norm2(rhs);
  c.amplitude_mass = st.amplitude_mass();
  c.phi_ok = c.phi_err <= c.phi_limit;
  c.delta_ok = c.delta_err <= c.eps2;
  c.rhs_ok = c.rhs_norm <= U_B * (1.0 + 1e-12);
  c.deviation_ok = c.deviation <= c.bound;
  return c;
}

HistoryState history_state(const SdeProblem& p, const HistoryOptions& opt, std::uint64_t i, QlssMode mode) {
  HistoryContext ctx(p, opt);
  HistoryCheck c = ctx.verify(i, mode);
  if (!c.pass())
    throw BoundViolation("history state deviation " + std::to_string(c.deviation) + " exceeds U_B eps = " +
                         std::to_string(c.bound) + " or a block condition failed");
  return ctx.state(i, mode);
}

}  // namespace qsde
