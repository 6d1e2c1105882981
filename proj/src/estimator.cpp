#include "qsde/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>

namespace qsde {

namespace {

constexpr std::uint64_t kShotStreamSalt = 0xbf58476d1ce4e5b9ULL;
constexpr std::uint64_t kChunk = 4096;

int ceil_int(double x) { return static_cast<int>(std::ceil(x - 1e-9)); }

std::uint64_t ceil_u64(double x) {
  if (!(x < 1.8e19)) throw Infeasible("sample count overflows 64 bits");
  return static_cast<std::uint64_t>(std::ceil(x - 1e-9));
}

void check_eps_delta(double eps, double delta) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw InvalidInput("accuracy eps must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidInput("failure probability delta must lie in (0, 1)");
}

int dyson_r(const SdeProblem& p) {
  const Bounds& b = p.bounds();
  return std::max(1, ceil_int(4.0 * b.kappa_BBT * b.alpha_A * p.T()));
}

void require_full_rank(const SdeProblem& p) {
  if (!p.full_rank_noise())
    throw BoundViolation("model '" + p.name() +
                         "' violates the full-rank noise assumption (kappa_BBT undeclared); use the EM algorithm");
}

double moment_base(const SdeProblem& p, int width, int d) {
  const double s2 = p.bounds().sigma * p.bounds().sigma;
  return dot(p.x0(), p.x0()) + (width + 2.0 * d) * s2 * p.T();
}

// Isserlis: E[prod_k c_k] for centred jointly Gaussian c over the listed variables.
double centred_moment(const std::vector<std::size_t>& vars, const std::function<double(std::size_t, std::size_t)>& cov) {
  if (vars.empty()) return 1.0;
  if (vars.size() % 2) return 0.0;
  double s = 0.0;
  for (std::size_t k = 1; k < vars.size(); ++k) {
    std::vector<std::size_t> rest;
    for (std::size_t j = 1; j < vars.size(); ++j)
      if (j != k) rest.push_back(vars[j]);
    s += cov(vars[0], vars[k]) * centred_moment(rest, cov);
  }
  return s;
}

}  // namespace

double double_factorial_odd(int k) {
  if (k < 0) throw InvalidInput("double_factorial_odd needs k >= 0");
  double f = 1.0;
  for (int j = 2 * k - 1; j > 1; j -= 2) f *= j;
  return f;
}

// ---------------------------------------------------------------------------
// observables

ObservableTensor::ObservableTensor(int d, int N, std::vector<ObservableEntry> entries) : d_(d), N_(N) {
  if (d < 1) throw InvalidInput("observable order d must be >= 1");
  if (N < 1) throw InvalidInput("observable state dimension must be >= 1");
  std::map<std::vector<Slot>, double> merged;
  for (const auto& e : entries) {
    if (static_cast<int>(e.idx.size()) != d) throw InvalidInput("observable entry has wrong number of indices");
    if (!std::isfinite(e.val)) throw InvalidInput("observable entry is not finite");
    for (const Slot& s : e.idx)
      if (s.step < -1 || s.comp < 0 || s.comp >= N) throw InvalidInput("observable index out of range");
    merged[e.idx] += e.val;
  }
  double f = 0.0;
  for (const auto& [idx, v] : merged) {
    if (v == 0.0) continue;
    entries_.push_back({idx, v});
    f += v * v;
  }
  frob_ = std::sqrt(f);
  if (!(frob_ > 0.0)) throw InvalidInput("observable tensor is zero");
}

ObservableTensor ObservableTensor::from_json(const nlohmann::json& doc, int N) {
  if (!doc.is_object()) throw ConfigError("observable must be a JSON object");
  for (const auto& [k, v] : doc.items())
    if (k != "d" && k != "entries") throw ConfigError("unknown observable key '" + k + "'");
  if (!doc.contains("d") || !doc.contains("entries")) throw ConfigError("observable needs 'd' and 'entries'");
  try {
    const int d = doc.at("d").get<int>();
    std::vector<ObservableEntry> out;
    for (const auto& e : doc.at("entries")) {
      for (const auto& [k, v] : e.items())
        if (k != "idx" && k != "val") throw ConfigError("unknown observable entry key '" + k + "'");
      ObservableEntry oe;
      oe.val = e.value("val", 1.0);
      for (const auto& s : e.at("idx")) {
        if (s.is_number_integer()) {
          oe.idx.push_back({-1, s.get<int>()});
        } else if (s.is_array() && s.size() == 2) {
          oe.idx.push_back({s[0].get<int>(), s[1].get<int>()});
        } else {
          throw ConfigError("observable index must be an integer or a [step, component] pair");
        }
      }
      out.push_back(std::move(oe));
    }
    return ObservableTensor(d, N, std::move(out));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed observable: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("invalid observable: ") + e.what());
  }
}

nlohmann::json ObservableTensor::to_json() const {
  nlohmann::json ents = nlohmann::json::array();
  for (const auto& e : entries_) {
    nlohmann::json idx = nlohmann::json::array();
    for (const Slot& s : e.idx) idx.push_back({s.step, s.comp});
    ents.push_back({{"idx", idx}, {"val", e.val}});
  }
  return {{"d", d_}, {"entries", ents}};
}

ObservableTensor ObservableTensor::terminal_power(int d, int N, int comp) {
  return ObservableTensor(d, N, {{std::vector<Slot>(d, Slot{-1, comp}), 1.0}});
}

ObservableTensor ObservableTensor::terminal_sum(int d, int N) {
  std::vector<ObservableEntry> e;
  for (int k = 0; k < N; ++k) e.push_back({std::vector<Slot>(d, Slot{-1, k}), 1.0});
  return ObservableTensor(d, N, std::move(e));
}

bool ObservableTensor::terminal_only(int r) const {
  for (const auto& e : entries_)
    for (const Slot& s : e.idx)
      if (s.step != -1 && s.step != r) return false;
  return true;
}

ObservableTensor::Resolved ObservableTensor::resolve(int r) const {
  std::map<std::vector<std::size_t>, double> merged;
  for (const auto& e : entries_) {
    std::vector<std::size_t> flat;
    for (const Slot& s : e.idx) {
      const int n = s.step < 0 ? r : s.step;
      if (n > r) throw InvalidInput("observable refers to step " + std::to_string(n) + " beyond r = " + std::to_string(r));
      flat.push_back(static_cast<std::size_t>(n) * N_ + s.comp);
    }
    merged[flat] += e.val;
  }
  Resolved out;
  double f = 0.0;
  for (const auto& [idx, v] : merged) {
    if (v == 0.0) continue;
    out.idx.push_back(idx);
    out.val.push_back(v);
    f += v * v;
  }
  out.frob = std::sqrt(f);
  if (!(out.frob > 0.0)) throw InvalidInput("observable tensor is zero on this grid");
  return out;
}

double ObservableTensor::evaluate(const Vec& history, int r) const {
  Resolved c = resolve(r);
  double y = 0.0;
  for (std::size_t e = 0; e < c.val.size(); ++e) {
    double t = c.val[e];
    for (std::size_t j : c.idx[e]) {
      if (j >= history.size()) throw InvalidInput("history vector too short for observable");
      t *= history[j];
    }
    y += t;
  }
  return y;
}

double gaussian_truth(const SdeProblem& p, const ObservableTensor& C, int r) {
  if (r < 1) throw InvalidInput("gaussian_truth needs r >= 1");
  const ObservableTensor::Resolved c = C.resolve(r);
  const std::size_t N = p.N();
  const TimeGrid grid(p.T(), r);
  int top = 0;
  for (const auto& idx : c.idx)
    for (std::size_t j : idx) top = std::max(top, static_cast<int>(j / N));

  std::vector<Mat> phi(top);
  std::vector<Vec> mean(top + 1);
  std::vector<Mat> var(top + 1);
  mean[0] = p.x0();
  var[0] = Mat(N, N);
  for (int n = 0; n < top; ++n) {
    phi[n] = exact_phi(p, grid.t(n), grid.t(n + 1));
    mean[n + 1] = matvec(phi[n], mean[n]);
    var[n + 1] = phi[n] * var[n] * phi[n].transpose() + exact_sigma(p, grid.t(n), grid.t(n + 1));
  }
  // Cov(X_a, X_b) = Phi(t_a, t_b) Var(X_b) for a >= b
  std::map<std::pair<int, int>, Mat> cache;
  auto cross = [&](int a, int b) -> const Mat& {
    auto key = std::make_pair(a, b);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    Mat m = var[b];
    for (int k = b; k < a; ++k) m = phi[k] * m;
    return cache.emplace(key, std::move(m)).first->second;
  };
  auto cov = [&](std::size_t u, std::size_t v) {
    int a = static_cast<int>(u / N), b = static_cast<int>(v / N);
    std::size_t i = u % N, k = v % N;
    if (a < b) {
      std::swap(a, b);
      std::swap(i, k);
    }
    return cross(a, b)(i, k);
  };

  double total = 0.0;
  for (std::size_t e = 0; e < c.val.size(); ++e) {
    const auto& idx = c.idx[e];
    const std::size_t d = idx.size();
    double s = 0.0;
    for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
      std::vector<std::size_t> centred;
      double mpart = 1.0;
      for (std::size_t k = 0; k < d; ++k) {
        if (mask & (1u << k)) {
          centred.push_back(idx[k]);
        } else {
          mpart *= mean[idx[k] / N][idx[k] % N];
        }
      }
      if (centred.size() % 2) continue;
      s += mpart * centred_moment(centred, cov);
    }
    total += c.val[e] * s;
  }
  return total;
}

// ---------------------------------------------------------------------------
// plans

const char* to_string(EstimatorMode m) {
  switch (m) {
    case EstimatorMode::dyson_multi: return "multi";
    case EstimatorMode::dyson_terminal: return "terminal";
    case EstimatorMode::em_multi: return "em";
  }
  return "?";
}

EstimatorMode parse_estimator_mode(const std::string& s) {
  if (s == "multi") return EstimatorMode::dyson_multi;
  if (s == "terminal") return EstimatorMode::dyson_terminal;
  if (s == "em") return EstimatorMode::em_multi;
  throw ConfigError("unknown algorithm '" + s + "' (expected multi, terminal or em)");
}

nlohmann::json EstimationPlan::to_json() const {
  return {{"mode", to_string(mode)},
          {"eps", eps},
          {"delta", delta},
          {"delta_prime", delta_prime},
          {"d", d},
          {"C_frob", C_frob},
          {"eps_prime", eps_prime},
          {"varepsilon_prime", varepsilon_prime},
          {"N_s", N_s},
          {"U_SN", U_SN},
          {"r", r},
          {"K", K},
          {"M", M},
          {"R", R},
          {"U_B", U_B},
          {"prefactor", prefactor},
          {"eps_OE", eps_OE},
          {"rescale", rescale},
          {"c_st", c_st},
          {"em_iterations", em_iterations},
          {"sample_error_bound", sample_error_bound}};
}

namespace {

// Shared tail of the multi-time and terminal plans once eps' is fixed.
void finish_dyson_plan(const SdeProblem& p, EstimationPlan& pl) {
  const Bounds& b = p.bounds();
  const double T = p.T(), N = p.N(), s2 = b.sigma * b.sigma, x0sq = dot(p.x0(), p.x0());
  pl.N_s = ceil_u64(2.0 / (pl.delta_prime * pl.eps_prime * pl.eps_prime));
  pl.U_SN = choose_usn(pl.r, N, static_cast<double>(pl.N_s), pl.delta_prime).U_SN;
  const double U2 = pl.U_SN * pl.U_SN;
  const double a1 = b.eta * b.eta * T * T / (8.0 * std::sqrt(3.0) * pl.r * pl.r);
  const double a2 = std::sqrt((x0sq + 4.0 * N * s2 * T * U2) / (48.0 * N * s2 * T * U2)) * b.eta * T / pl.r;
  pl.varepsilon_prime = std::min(a1, a2) * pl.eps_prime;
  KrmChoice krm = choose_krm_sqrt(p, std::min(pl.varepsilon_prime, 1.0));
  pl.K = krm.K;
  pl.M = krm.M;
  pl.U_B = std::sqrt(x0sq + 4.0 * N * s2 * T * U2);
}

}  // namespace

EstimationPlan plan_multi_time(const SdeProblem& p, const ObservableTensor& C, double eps, double delta) {
  check_eps_delta(eps, delta);
  require_full_rank(p);
  EstimationPlan pl;
  pl.mode = EstimatorMode::dyson_multi;
  pl.eps = eps;
  pl.delta = delta;
  pl.delta_prime = delta / 2.0;
  pl.d = C.d();
  pl.r = dyson_r(p);
  pl.C_frob = C.resolve(pl.r).frob;
  const int d = pl.d;
  const double df = double_factorial_odd(d - 1), Q = moment_base(p, p.N(), d);
  pl.eps_prime = eps / (12.0 * std::pow(2.0, d) * d * std::sqrt(df) * std::pow(pl.r + 1.0, d / 2.0) *
                        std::pow(Q, d / 2.0) * pl.C_frob);
  if (pl.eps_prime > 1.0 / 3.0)
    throw Infeasible("eps' = " + std::to_string(pl.eps_prime) +
                     " exceeds 1/3; the multi-time estimator requires a smaller target accuracy");
  finish_dyson_plan(p, pl);
  pl.prefactor = p.max_eta_T() / (8.0 * pl.r * pl.U_B);
  const double pd = std::pow(pl.prefactor, d);
  pl.eps_OE = pd * eps / (2.0 * pl.C_frob);
  pl.rescale = pl.C_frob / pd;
  pl.sample_error_bound = 3.0 * d * std::sqrt(df) * std::pow(1.0 + 3.0 * pl.eps_prime, d) *
                          std::pow(pl.r + 1.0, d / 2.0) * std::pow(Q, d / 2.0) * pl.C_frob *
                          (pl.eps_prime + std::sqrt(2.0 / (pl.delta_prime * pl.N_s)));
  return pl;
}

EstimationPlan plan_terminal(const SdeProblem& p, const ObservableTensor& C, double eps, double delta) {
  check_eps_delta(eps, delta);
  require_full_rank(p);
  EstimationPlan pl;
  pl.mode = EstimatorMode::dyson_terminal;
  pl.eps = eps;
  pl.delta = delta;
  pl.delta_prime = delta / 2.0;
  pl.d = C.d();
  pl.r = dyson_r(p);
  if (!C.terminal_only(pl.r)) throw InvalidInput("the terminal-time estimator needs an observable on X_T only");
  pl.C_frob = C.resolve(pl.r).frob;
  pl.R = static_cast<int>(std::lround(pl.r / p.max_eta_T()));
  const int d = pl.d;
  const double df = double_factorial_odd(d - 1), Q = moment_base(p, p.N(), d);
  pl.eps_prime = eps / (12.0 * std::pow(2.0, d) * d * std::sqrt(df) * std::pow(Q, d / 2.0) * pl.C_frob);
  if (pl.eps_prime > 1.0 / 3.0)
    throw Infeasible("eps' = " + std::to_string(pl.eps_prime) +
                     " exceeds 1/3; the terminal-time estimator requires a smaller target accuracy");
  finish_dyson_plan(p, pl);
  pl.prefactor = 1.0 / (2.0 * (4.0 * pl.r / p.max_eta_T() + pl.R) * pl.U_B);
  const double pd = std::pow(pl.prefactor, d), sq = std::sqrt(pl.R + 1.0);
  pl.eps_OE = sq * pd * eps / (2.0 * pl.C_frob);
  pl.rescale = pl.C_frob / (pd * sq);
  pl.sample_error_bound = 3.0 * d * std::sqrt(df) * std::pow(1.0 + 3.0 * pl.eps_prime, d) * std::pow(Q, d / 2.0) *
                          pl.C_frob * (pl.eps_prime + std::sqrt(2.0 / (pl.delta_prime * pl.N_s)));
  return pl;
}

namespace {

double em_bound(const SdeProblem& p, int d, int r, double frob, double eps_p, double delta_p, double N_s,
                double c_st) {
  const double df = double_factorial_odd(d - 1), Q = moment_base(p, p.m(), d);
  const double stat = std::sqrt(df) * std::pow(1.0 + eps_p, d - 1) * std::pow(r + 1.0, d / 2.0) *
                      std::pow(Q, d / 2.0) * frob *
                      (std::sqrt(2.0 * d - 1.0) * (1.0 + eps_p) * std::sqrt(2.0 / (delta_p * N_s)) + d * eps_p);
  const double bias = d * std::sqrt(df) * std::pow(r + 1.0, (d - 1) / 2.0) * std::pow(Q, (d - 1) / 2.0) * frob *
                      std::sqrt(c_st / r);
  return stat + bias;
}

void finish_em_plan(const SdeProblem& p, EstimationPlan& pl) {
  const double s2 = p.bounds().sigma * p.bounds().sigma;
  const int d = pl.d;
  pl.N_s = ceil_u64(16.0 / (d * pl.delta_prime * pl.eps_prime * pl.eps_prime));
  pl.U_SN = choose_usn(pl.r, p.m(), static_cast<double>(pl.N_s), pl.delta_prime).U_SN;
  pl.U_B = std::sqrt(dot(p.x0(), p.x0()) + p.m() * s2 * p.T() * pl.U_SN * pl.U_SN);
  pl.prefactor = p.max_eta_T() / (8.0 * pl.r * pl.U_B);
  const double pd = std::pow(pl.prefactor, d);
  pl.eps_OE = pd * pl.eps / (4.0 * pl.C_frob);
  pl.rescale = pl.C_frob / pd;
  pl.K = 0;
  pl.M = 1.0;
  pl.sample_error_bound = em_bound(p, d, pl.r, pl.C_frob, pl.eps_prime, pl.delta_prime,
                                   static_cast<double>(pl.N_s), pl.c_st);
}

EstimationPlan em_plan_base(const ObservableTensor& C, double delta, double c_st) {
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidInput("failure probability delta must lie in (0, 1)");
  if (!(c_st >= 0.0) || !std::isfinite(c_st)) throw InvalidInput("strong-error constant must be non-negative");
  EstimationPlan pl;
  pl.mode = EstimatorMode::em_multi;
  pl.delta = delta;
  pl.delta_prime = delta / 2.0;
  pl.d = C.d();
  pl.c_st = c_st;
  return pl;
}

}  // namespace

EstimationPlan plan_em(const SdeProblem& p, const ObservableTensor& C, double eps, double delta, double c_st) {
  check_eps_delta(eps, delta);
  EstimationPlan pl = em_plan_base(C, delta, c_st);
  pl.eps = eps;
  const int d = pl.d, r_min = em_min_steps(p);
  const double df = double_factorial_odd(d - 1), Q = moment_base(p, p.m(), d);
  int r = r_min;
  for (int it = 1; it <= 20; ++it) {
    const double frob = C.resolve(r).frob;
    const double ep = std::min(eps / (std::pow(2.0, d + 1) * d * std::sqrt(df) * std::pow(r + 1.0, d / 2.0) *
                                      std::pow(Q, d / 2.0) * frob),
                               1.0);
    const double need = std::max(static_cast<double>(r_min), std::ceil(c_st / (ep * ep) - 1e-9));
    if (need <= r) {
      pl.r = r;
      pl.eps_prime = ep;
      pl.C_frob = frob;
      pl.em_iterations = it;
      finish_em_plan(p, pl);
      return pl;
    }
    if (need > 1e8) break;
    r = static_cast<int>(need);
  }
  throw Infeasible("no (r, eps'_EM) pair satisfies the EM step condition within 20 iterations; "
                   "increase eps or use the relative accuracy form");
}

EstimationPlan plan_em_relative(const SdeProblem& p, const ObservableTensor& C, double eps_rel, double delta,
                                double c_st) {
  if (!(eps_rel > 0.0)) throw InvalidInput("relative accuracy must be positive");
  EstimationPlan pl = em_plan_base(C, delta, c_st);
  const int d = pl.d;
  const double df = double_factorial_odd(d - 1), Q = moment_base(p, p.m(), d);
  pl.eps_prime = std::min(eps_rel / (std::pow(2.0, d + 1) * d * std::sqrt(df)), 1.0);
  const double need = std::max(static_cast<double>(em_min_steps(p)), std::ceil(c_st / (pl.eps_prime * pl.eps_prime) - 1e-9));
  if (need > 1e8) throw Infeasible("EM step count exceeds 1e8");
  pl.r = static_cast<int>(need);
  pl.C_frob = C.resolve(pl.r).frob;
  pl.eps = std::pow(pl.r + 1.0, d / 2.0) * std::pow(Q, d / 2.0) * pl.C_frob * eps_rel;
  pl.em_iterations = 1;
  finish_em_plan(p, pl);
  return pl;
}

double relative_eps_multi(const SdeProblem& p, const ObservableTensor& C, double eps_rel) {
  const double s2 = p.bounds().sigma * p.bounds().sigma;
  const int r = dyson_r(p);
  return std::pow(r * (dot(p.x0(), p.x0()) + p.N() * s2 * p.T()), C.d() / 2.0) * C.resolve(r).frob * eps_rel;
}

double relative_eps_terminal(const SdeProblem& p, const ObservableTensor& C, double eps_rel) {
  const double s2 = p.bounds().sigma * p.bounds().sigma;
  return std::pow(dot(p.x0(), p.x0()) + p.N() * s2 * p.T(), C.d() / 2.0) * C.frob_norm() * eps_rel;
}

// ---------------------------------------------------------------------------
// overlap estimation

nlohmann::json QueryLedger::to_json() const {
  return {{"overlap_queries", overlap_queries},
          {"history_oracle_uses", history_oracle_uses},
          {"qlss_calls_per_history", qlss_calls_per_history},
          {"u_A_calls", u_A_calls},
          {"u_rand_calls", u_rand_calls}};
}

QueryLedger query_ledger(const SdeProblem& p, const EstimationPlan& plan) {
  QueryLedger q;
  q.overlap_queries = ceil_u64(4.0 * std::log(1.0 / plan.delta_prime) / plan.eps_OE);
  q.history_oracle_uses = q.overlap_queries * static_cast<std::uint64_t>(plan.d);
  const double mx = p.max_eta_T();
  double kappa = 0.0, eps3 = 0.0, per_block = 1.0;
  if (plan.mode == EstimatorMode::em_multi) {
    kappa = 12.0 * plan.r / mx;
    eps3 = mx * plan.eps_prime / (8.0 * plan.r);
  } else {
    const double at = 1.0 + std::numbers::e;
    kappa = plan.mode == EstimatorMode::dyson_terminal ? at * (4.0 * plan.r / mx + plan.R) : 4.0 * plan.r * at / mx;
    eps3 = at * plan.eps_prime / (4.0 * kappa);
    per_block = plan.K;
  }
  q.qlss_calls_per_history = ceil_u64(kappa * std::log(1.0 / eps3));
  q.u_A_calls = static_cast<std::uint64_t>(
      std::min(1.8e19, static_cast<double>(q.history_oracle_uses) * q.qlss_calls_per_history * per_block));
  q.u_rand_calls = q.history_oracle_uses;
  return q;
}

Vec build_observable_state(const ObservableTensor& C, const EstimationPlan& plan) {
  const std::size_t N = C.N();
  const int tail = plan.mode == EstimatorMode::dyson_terminal ? plan.R : 0;
  const std::size_t D = N * (plan.r + tail + 1);
  const int d = C.d();
  const double inner = std::pow(static_cast<double>(D), d);
  const double total = static_cast<double>(plan.N_s) * 2.0 * inner;
  if (total > (1 << 24)) throw InvalidInput("observable state too large to materialize");
  const std::size_t block = static_cast<std::size_t>(2.0 * inner);
  Vec v(static_cast<std::size_t>(total), 0.0);
  ObservableTensor::Resolved c = C.resolve(plan.r);
  const double norm = 1.0 / (c.frob * std::sqrt(tail + 1.0) * std::sqrt(static_cast<double>(plan.N_s)));
  for (std::uint64_t i = 0; i < plan.N_s; ++i)
    for (int t = 0; t <= tail; ++t)
      for (std::size_t e = 0; e < c.val.size(); ++e) {
        std::size_t pos = 0;
        for (std::size_t j : c.idx[e]) pos = pos * D + j + t * N;
        v[i * block + pos] += c.val[e] * norm;  // flag 0
      }
  return v;
}

Vec build_history_superposition(const std::vector<Vec>& raw, double prefactor, int d) {
  if (raw.empty()) throw InvalidInput("no history samples");
  const std::size_t D = raw[0].size();
  const double inner = std::pow(static_cast<double>(D), d);
  if (raw.size() * 2.0 * inner > (1 << 24)) throw InvalidInput("history superposition too large to materialize");
  const std::size_t block = static_cast<std::size_t>(2.0 * inner), in = static_cast<std::size_t>(inner);
  const double ns = 1.0 / std::sqrt(static_cast<double>(raw.size()));
  Vec v(raw.size() * block, 0.0);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].size() != D) throw InvalidInput("history samples differ in length");
    Vec x = raw[i];
    for (double& a : x) a *= prefactor;
    // d-fold tensor power by repeated Kronecker products
    Vec t{1.0};
    for (int k = 0; k < d; ++k) {
      Vec nt(t.size() * D);
      for (std::size_t a = 0; a < t.size(); ++a)
        for (std::size_t b = 0; b < D; ++b) nt[a * D + b] = t[a] * x[b];
      t.swap(nt);
    }
    const double mass = dot(t, t);
    if (mass > 1.0 + 1e-12) throw InvalidInput("scaled history state has norm above 1");
    for (std::size_t a = 0; a < in; ++a) v[i * block + a] = ns * t[a];
    v[i * block + in] = ns * std::sqrt(std::max(0.0, 1.0 - mass));  // flag 1 garbage
  }
  return v;
}

double overlap_noise(double eps_OE, const PcgStream& stream, std::uint64_t index) {
  if (index < 1) throw InvalidInput("overlap noise index must be >= 1");
  const std::uint64_t base = 1 + (index - 1) * 64;
  double z = 0.0;
  for (std::uint64_t k = 0; k < 64; ++k) {
    z = std_normal(stream, base + k);
    if (std::fabs(z) <= 3.0) break;
  }
  z = std::clamp(z, -3.0, 3.0);
  return eps_OE * z / 3.0;
}

double overlap_estimate(const Vec& u, const Vec& v, double eps_OE, OverlapMode mode, const PcgStream& stream,
                        std::uint64_t index) {
  if (u.size() != v.size()) throw InvalidInput("overlap_estimate: dimension mismatch");
  if (norm2(u) > 1.0 + 1e-12 || norm2(v) > 1.0 + 1e-12) throw InvalidInput("overlap_estimate: states exceed unit norm");
  const double exact = dot(u, v);
  if (mode == OverlapMode::exact) return exact;
  if (!(eps_OE > 0.0)) throw InvalidInput("overlap accuracy must be positive");
  return exact + overlap_noise(eps_OE, stream, index);
}

// ---------------------------------------------------------------------------
// sampling

void PathSampler::sample(std::uint64_t i, Vec& z, Vec& x) const {
  NormalCursor cur(stream, first_normal(i));
  sample(i, cur, z, x);
}

void PathSampler::sample(std::uint64_t i, NormalCursor& cur, Vec& z, Vec& x) const {
  const std::size_t nz = static_cast<std::size_t>(r) * w;
  if (cur.next_index() != first_normal(i)) throw Error("internal: normal cursor out of position");
  z.resize(nz);
  x.resize(dim());
  cur.fill(nz, z.data());
  const bool clipped = std::isfinite(U_SN);
  for (double& v : z) v = (clipped ? clip(v, ClipBound{U_SN}) : v) * noise_scale;
  std::copy(x0.begin(), x0.end(), x.begin());
  double bsq = dot(x0, x0);
  for (int n = 0; n < r; ++n) {
    const double* prev = x.data() + n * N;
    double* cur = x.data() + (n + 1) * N;
    const double* zn = z.data() + n * w;
    const Mat& P = step[n];
    const Mat& S = noise[n];
    for (std::size_t a = 0; a < N; ++a) {
      double s = 0.0;
      for (std::size_t k = 0; k < N; ++k) s += P(a, k) * prev[k];
      double d = 0.0;
      for (std::size_t k = 0; k < w; ++k) d += S(a, k) * zn[k];
      cur[a] = s + d;
      bsq += d * d;
    }
  }
  for (int n = r; n < r + R; ++n) std::copy(x.begin() + n * N, x.begin() + (n + 1) * N, x.begin() + (n + 1) * N);
  if (mode == QlssMode::adversarial && inv_error > 0.0) {
    const std::size_t D = dim();
    Vec dir(D);
    fill_normals(qlss_stream, 1 + (i - 1) * D, D, dir.data());
    const double nd = norm2(dir);
    if (nd > 0.0) axpy(inv_error * std::sqrt(bsq) / nd, dir, x);
  }
}

PathSampler sampler_from(const HistoryContext& ctx, QlssMode mode) {
  PathSampler s;
  const SdeProblem& p = ctx.problem();
  s.N = p.N();
  s.w = p.N();
  s.r = ctx.plan().r_c;
  s.R = ctx.plan().R;
  s.step = ctx.system().blocks;
  s.noise = ctx.covariance().s_tilde;
  s.x0 = p.x0();
  s.U_SN = ctx.plan().U_SN;
  s.stream = ctx.stream();
  QlssModel q = ctx.qlss(1, mode);
  s.mode = mode;
  s.inv_error = q.inv_error;
  s.qlss_stream = q.stream;
  return s;
}

PathSampler sampler_from(const EmHistoryContext& ctx, const SdeProblem& p, QlssMode mode) {
  PathSampler s;
  const TimeGrid& g = ctx.grid();
  s.N = p.N();
  s.w = p.m();
  s.r = g.r;
  s.step = ctx.system().blocks;
  for (int n = 0; n < g.r; ++n) s.noise.push_back(p.B(g.t(n)));
  s.noise_scale = std::sqrt(g.dt);
  s.x0 = p.x0();
  s.U_SN = ctx.clip_bound().U_SN;
  s.stream = ctx.stream();
  QlssModel q = ctx.qlss(1, mode);
  s.mode = mode;
  s.inv_error = q.inv_error;
  s.qlss_stream = q.stream;
  return s;
}

PathSampler exact_sampler(const SdeProblem& p, int r, int R, const PcgStream& stream) {
  if (r < 1 || R < 0) throw InvalidInput("exact_sampler needs r >= 1 and R >= 0");
  PathSampler s;
  const TimeGrid g(p.T(), r);
  s.N = p.N();
  s.w = p.N();
  s.r = r;
  s.R = R;
  s.step = exact_phi_blocks(p, g);
  s.noise.resize(r);
  const double s2 = p.bounds().sigma * p.bounds().sigma;
#pragma omp parallel for schedule(dynamic)
  for (int n = 0; n < r; ++n)
    s.noise[n] = sqrt_psd(exact_sigma(p, g.t(n), g.t(n + 1)), 1e-10 * std::max(1.0, s2 * g.dt));
  s.x0 = p.x0();
  s.stream = stream;
  return s;
}

PathSampler em_sampler(const SdeProblem& p, int r, const PcgStream& stream) {
  if (r < 1) throw InvalidInput("em_sampler needs r >= 1");
  PathSampler s;
  const TimeGrid g(p.T(), r);
  s.N = p.N();
  s.w = p.m();
  s.r = r;
  s.step = assemble_em_system(p, g).blocks;
  for (int n = 0; n < r; ++n) s.noise.push_back(p.B(g.t(n)));
  s.noise_scale = std::sqrt(g.dt);
  s.x0 = p.x0();
  s.stream = stream;
  return s;
}

namespace {

SampleSums chunk_sums(const PathSampler& s, const ObservableTensor::Resolved& C, int tail, double prefactor,
                      std::uint64_t first, std::uint64_t count) {
  Vec z, x;
  SampleSums out;
  const double w_tail = 1.0 / (tail + 1.0), w_amp = 1.0 / (C.frob * std::sqrt(tail + 1.0));
  NormalCursor cur(s.stream, s.first_normal(first));
  for (std::uint64_t i = first; i < first + count; ++i) {
    s.sample(i, cur, z, x);
    double y = 0.0, o = 0.0;
    for (int t = 0; t <= tail; ++t) {
      const std::size_t off = static_cast<std::size_t>(t) * s.N;
      for (std::size_t e = 0; e < C.val.size(); ++e) {
        double py = C.val[e], po = C.val[e] * w_amp;
        for (std::size_t j : C.idx[e]) {
          py *= x[j + off];
          po *= prefactor * x[j + off];
        }
        y += py;
        o += po;
      }
    }
    out.y_hat += y * w_tail;
    out.overlap += o;
  }
  return out;
}

SampleSums sums_impl(const PathSampler& s, const ObservableTensor::Resolved& C, int tail, double prefactor,
                     std::uint64_t first, std::uint64_t n, bool parallel) {
  if (n == 0) throw InvalidInput("sample count must be positive");
  if (first < 1) throw InvalidInput("sample indices start at 1");
  for (const auto& idx : C.idx)
    for (std::size_t j : idx)
      if (j >= s.N * static_cast<std::size_t>(s.r + 1)) throw InvalidInput("observable index beyond the history");
  const std::uint64_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<SampleSums> part(chunks);
  auto run = [&](std::int64_t c) {
    const std::uint64_t lo = static_cast<std::uint64_t>(c) * kChunk;
    part[c] = chunk_sums(s, C, tail, prefactor, first + lo, std::min<std::uint64_t>(kChunk, n - lo));
  };
  if (parallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(chunks); ++c) run(c);
  } else {
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(chunks); ++c) run(c);
  }
  SampleSums out;
  for (const auto& p : part) {
    out.y_hat += p.y_hat;
    out.overlap += p.overlap;
  }
  out.y_hat /= static_cast<double>(n);
  out.overlap /= static_cast<double>(n);
  return out;
}

}  // namespace

SampleSums sample_sums(const PathSampler& s, const ObservableTensor::Resolved& C, int tail, double prefactor,
                       std::uint64_t first, std::uint64_t n) {
  return sums_impl(s, C, tail, prefactor, first, n, true);
}

SampleSums sample_sums_serial(const PathSampler& s, const ObservableTensor::Resolved& C, int tail, double prefactor,
                              std::uint64_t first, std::uint64_t n) {
  return sums_impl(s, C, tail, prefactor, first, n, false);
}

// ---------------------------------------------------------------------------
// estimators

nlohmann::json EstimateReport::to_json() const {
  nlohmann::json j;
  j["plan"] = plan.to_json();
  j["query_ledger"] = ledger.to_json();
  j["M_emu"] = M_emu;
  j["mu_hat"] = mu_hat.size() == 1 ? nlohmann::json(mu_hat[0]) : nlohmann::json(mu_hat);
  j["y_hat"] = y_hat.size() == 1 ? nlohmann::json(y_hat[0]) : nlohmann::json(y_hat);
  j["eps"] = plan.eps;
  j["delta"] = plan.delta;
  j["truth"] = truth;
  j["abs_error"] = abs_error.size() == 1 ? nlohmann::json(abs_error[0]) : nlohmann::json(abs_error);
  j["within_eps"] = within_eps;
  j["repeats"] = mu_hat.size();
  j["history_verified"] = history_verified;
  j["history_deviation"] = history_deviation;
  j["history_bound"] = history_bound;
  return j;
}

namespace {

void run_repeats(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                 const EstimateOptions& opt, const PathSampler& s, EstimateReport& rep) {
  if (opt.repeats < 1) throw InvalidInput("repeats must be >= 1");
  const int tail = plan.mode == EstimatorMode::dyson_terminal ? plan.R : 0;
  ObservableTensor::Resolved c = C.resolve(plan.r);
  const PcgStream shot(opt.seed, opt.stream_id ^ kShotStreamSalt);
  rep.truth = gaussian_truth(p, C, plan.r);
  for (int k = 0; k < opt.repeats; ++k) {
    SampleSums ss = sample_sums(s, c, tail, plan.prefactor, 1 + static_cast<std::uint64_t>(k) * plan.N_s, plan.N_s);
    double mu = ss.overlap;
    if (opt.overlap == OverlapMode::shot) mu += overlap_noise(plan.eps_OE, shot, k + 1);
    mu *= plan.rescale;
    rep.mu_hat.push_back(mu);
    rep.y_hat.push_back(ss.y_hat);
    rep.abs_error.push_back(std::fabs(mu - rep.truth));
    if (rep.abs_error.back() <= plan.eps) ++rep.within_eps;
  }
}

void check_match(double a, double b, const char* what) {
  if (std::fabs(a - b) > 1e-12 * std::max(std::fabs(a), std::fabs(b)))
    throw Error(std::string("internal: plan and history construction disagree on ") + what);
}

EstimateReport estimate_dyson(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                              const EstimateOptions& opt, bool padded) {
  require_full_rank(p);
  HistoryOptions ho;
  ho.eps = plan.eps_prime;
  ho.varepsilon = plan.varepsilon_prime;
  ho.padded = padded;
  ho.R = plan.R;
  ho.U_SN = plan.U_SN;
  ho.N_s = static_cast<double>(plan.N_s);
  ho.delta = plan.delta_prime;
  ho.seed = opt.seed;
  ho.stream_id = opt.stream_id;
  HistoryContext ctx(p, ho);
  check_match(ctx.plan().U_B, plan.U_B, "U_B");
  check_match(ctx.plan().prefactor, plan.prefactor, "the state prefactor");
  EstimateReport rep;
  rep.plan = plan;
  rep.ledger = query_ledger(p, plan);
  rep.M_emu = ctx.plan().M_emu;
  if (opt.verify_first_sample) {
    HistoryCheck hc = ctx.verify(1, opt.qlss);
    rep.history_verified = hc.pass();
    rep.history_deviation = hc.deviation;
    rep.history_bound = hc.bound;
  }
  run_repeats(p, C, plan, opt, sampler_from(ctx, opt.qlss), rep);
  return rep;
}

}  // namespace

EstimateReport estimate_multi_time(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                                   const EstimateOptions& opt) {
  if (plan.mode != EstimatorMode::dyson_multi) throw InvalidInput("plan is not a multi-time plan");
  return estimate_dyson(p, C, plan, opt, false);
}

EstimateReport estimate_terminal(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                                 const EstimateOptions& opt) {
  if (plan.mode != EstimatorMode::dyson_terminal) throw InvalidInput("plan is not a terminal-time plan");
  return estimate_dyson(p, C, plan, opt, true);
}

EstimateReport estimate_em(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                           const EstimateOptions& opt) {
  if (plan.mode != EstimatorMode::em_multi) throw InvalidInput("plan is not an EM plan");
  EmHistoryContext ctx(p, plan.r, plan.eps_prime, plan.U_SN, PcgStream(opt.seed, opt.stream_id));
  check_match(ctx.U_B(), plan.U_B, "U_B");
  check_match(ctx.prefactor(), plan.prefactor, "the state prefactor");
  EstimateReport rep;
  rep.plan = plan;
  rep.ledger = query_ledger(p, plan);
  if (opt.verify_first_sample) {
    EmHistoryCheck hc = ctx.verify(1, opt.qlss);
    rep.history_verified = hc.pass();
    rep.history_deviation = hc.deviation;
    rep.history_bound = hc.bound;
  }
  run_repeats(p, C, plan, opt, sampler_from(ctx, p, opt.qlss), rep);
  return rep;
}

EstimateReport run_estimate(const SdeProblem& p, const ObservableTensor& C, const EstimationPlan& plan,
                            const EstimateOptions& opt) {
  switch (plan.mode) {
    case EstimatorMode::dyson_multi: return estimate_multi_time(p, C, plan, opt);
    case EstimatorMode::dyson_terminal: return estimate_terminal(p, C, plan, opt);
    case EstimatorMode::em_multi: return estimate_em(p, C, plan, opt);
  }
  throw Error("internal: unknown estimator mode");
}

// ---------------------------------------------------------------------------
// bound validators

const char* to_string(MomentKind k) {
  switch (k) {
    case MomentKind::multi: return "multi";
    case MomentKind::terminal: return "terminal";
    case MomentKind::em: return "em";
    case MomentKind::multi_tilde: return "multi_tilde";
    case MomentKind::em_tilde: return "em_tilde";
  }
  return "?";
}

double moment_bound(const SdeProblem& p, MomentKind kind, int d, int r, double eps) {
  const double df = double_factorial_odd(d);
  const bool em = kind == MomentKind::em || kind == MomentKind::em_tilde;
  const double Q = moment_base(p, em ? p.m() : p.N(), d);
  double b = df * std::pow(Q, d);
  if (kind != MomentKind::terminal) b *= std::pow(r + 1.0, d);
  if (kind == MomentKind::multi_tilde) b *= std::pow(1.0 + 3.0 * eps, 2 * d);
  if (kind == MomentKind::em_tilde) b *= std::pow(1.0 + eps, 2 * d);
  return b;
}

MomentReport moment_bound_check(const SdeProblem& p, MomentKind kind, int d, std::uint64_t N_s, int r,
                                const PcgStream& stream, double eps) {
  if (d < 1 || d > 3) throw InvalidInput("moment check supports d in {1, 2, 3}");
  if (N_s < 2) throw InvalidInput("moment check needs at least two samples");
  const bool em = kind == MomentKind::em || kind == MomentKind::em_tilde;
  if (r <= 0) r = em ? em_min_steps(p) : dyson_r(p);
  PathSampler s;
  std::size_t lo = 0, hi = 0;  // slot range whose norm is taken
  switch (kind) {
    case MomentKind::multi:
    case MomentKind::terminal:
      s = exact_sampler(p, r, 0, stream);
      break;
    case MomentKind::em:
      s = em_sampler(p, r, stream);
      break;
    case MomentKind::multi_tilde: {
      HistoryOptions ho;
      ho.eps = eps;
      ho.N_s = static_cast<double>(N_s);
      ho.seed = stream.seed;
      ho.stream_id = stream.stream_id;
      HistoryContext ctx(p, ho);
      r = ctx.plan().r_c;
      s = sampler_from(ctx, QlssMode::adversarial);
      break;
    }
    case MomentKind::em_tilde: {
      EmHistoryContext ctx(p, r, eps, choose_usn(r, p.m(), static_cast<double>(N_s), 0.1).U_SN, stream);
      s = sampler_from(ctx, p, QlssMode::adversarial);
      break;
    }
  }
  if (kind == MomentKind::terminal) {
    lo = static_cast<std::size_t>(r) * s.N;
    hi = lo + s.N;
  } else {
    hi = s.dim();
  }
  const std::uint64_t chunks = (N_s + kChunk - 1) / kChunk;
  std::vector<std::pair<double, double>> part(chunks);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t c = 0; c < static_cast<std::int64_t>(chunks); ++c) {
    Vec z, x;
    const std::uint64_t a = static_cast<std::uint64_t>(c) * kChunk;
    const std::uint64_t b = std::min<std::uint64_t>(N_s, a + kChunk);
    double s1 = 0.0, s2 = 0.0;
    NormalCursor cur(s.stream, s.first_normal(a + 1));
    for (std::uint64_t i = a + 1; i <= b; ++i) {
      s.sample(i, cur, z, x);
      double n2 = 0.0;
      for (std::size_t k = lo; k < hi; ++k) n2 += x[k] * x[k];
      const double v = std::pow(n2, d);
      s1 += v;
      s2 += v * v;
    }
    part[c] = {s1, s2};
  }
  double s1 = 0.0, s2 = 0.0;
  for (const auto& [a, b] : part) {
    s1 += a;
    s2 += b;
  }
  MomentReport rep;
  rep.kind = kind;
  rep.d = d;
  rep.r = r;
  rep.N_s = N_s;
  const double n = static_cast<double>(N_s);
  rep.estimate = s1 / n;
  const double var = std::max(0.0, (s2 - n * rep.estimate * rep.estimate) / (n - 1.0));
  rep.std_error = std::sqrt(var / n);
  rep.bound = moment_bound(p, kind, d, r, eps);
  const double rel_se = rep.estimate > 0.0 ? rep.std_error / rep.estimate : 0.0;
  rep.pass = rep.estimate <= rep.bound * (1.0 + 3.0 * rel_se);
  return rep;
}

ConcentrationReport sample_average_bound_check(const SdeProblem& p, const ObservableTensor& C, EstimatorMode mode,
                                               double delta, std::uint64_t N_s, int repeats, const PcgStream& stream,
                                               int r, double c_st) {
  if (repeats < 1) throw InvalidInput("repeats must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidInput("delta must lie in (0, 1)");
  const int d = C.d();
  const double df = double_factorial_odd(d - 1);
  ConcentrationReport rep;
  rep.mode = mode;
  rep.repeats = repeats;
  rep.N_s = N_s;
  rep.delta = delta;
  const double n = static_cast<double>(N_s);
  PathSampler s;
  int tail = 0;
  if (mode == EstimatorMode::em_multi) {
    if (r <= 0) r = em_min_steps(p);
    s = em_sampler(p, r, stream);
    s.U_SN = choose_usn(r, p.m(), n, delta).U_SN;
    const double frob = C.resolve(r).frob;
    rep.bound = em_bound(p, d, r, frob, 0.0, delta, n, c_st);
  } else {
    require_full_rank(p);
    if (r <= 0) r = dyson_r(p);
    const double Q = moment_base(p, p.N(), d), frob = C.resolve(r).frob;
    if (mode == EstimatorMode::dyson_terminal) {
      if (!C.terminal_only(r)) throw InvalidInput("terminal check needs an observable on X_T only");
      tail = static_cast<int>(std::lround(r / p.max_eta_T()));
      rep.bound = 3.0 * d * std::sqrt(df) * std::pow(Q, d / 2.0) * frob * std::sqrt(2.0 / (delta * n));
    } else {
      rep.bound =
          3.0 * d * std::sqrt(df) * std::pow(r + 1.0, d / 2.0) * std::pow(Q, d / 2.0) * frob * std::sqrt(2.0 / (delta * n));
    }
    s = exact_sampler(p, r, tail, stream);
    s.U_SN = choose_usn(r, p.N(), n, delta).U_SN;
  }
  rep.truth = gaussian_truth(p, C, r);
  ObservableTensor::Resolved c = C.resolve(r);
  for (int k = 0; k < repeats; ++k) {
    SampleSums ss = sample_sums(s, c, tail, 1.0, 1 + static_cast<std::uint64_t>(k) * N_s, N_s);
    const double err = std::fabs(ss.y_hat - rep.truth);
    rep.max_error = std::max(rep.max_error, err);
    if (err > rep.bound) ++rep.violations;
  }
  rep.frequency = static_cast<double>(rep.violations) / repeats;
  rep.allowed = delta + 3.0 * std::sqrt(delta * (1.0 - delta) / repeats);
  rep.pass = rep.frequency <= rep.allowed;
  return rep;
}

}  // namespace qsde
