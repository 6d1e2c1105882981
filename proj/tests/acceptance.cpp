// Acceptance checks: one PASS/FAIL line per criterion on stdout, details on stderr.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qsde/combinatorics.hpp"
#include "qsde/dyson.hpp"
#include "qsde/em.hpp"
#include "qsde/estimator.hpp"
#include "qsde/history.hpp"
#include "qsde/model.hpp"
#include "qsde/prng.hpp"

using namespace qsde;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 20240601ULL;

struct Outcome {
  bool pass = true;
  std::string summary;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1 ----
Outcome dyson_truncation() {
  Timer t;
  Outcome o;
  double worst = 0.0;
  int runs = 0;
  for (const char* m : {"const-diag", "timedep", "rotating"})
    for (double eps : {1e-2, 1e-4}) {
      ErrorCheckReport r = dyson_error_bound_check(builtin_model(m), eps);
      std::cerr << "  [1] " << m << " eps=" << eps << " K=" << r.K << " r=" << r.r << " M=" << r.M
                << " err=" << r.measured_error << "\n";
      o.pass = o.pass && r.pass;
      worst = std::max(worst, r.measured_error / eps);
      ++runs;
    }
  const double s = t.seconds();
  o.pass = o.pass && s <= 60.0;
  o.summary = "max measured/eps " + fmt("%.3g", worst) + " over " + std::to_string(runs) + " runs, " +
              fmt("%.1f", s) + " s (limit 60)";
  return o;
}

// ---- 2 ----
Outcome covariance_approximation() {
  Timer t;
  Outcome o;
  double worst = 0.0;
  for (const char* m : {"const-diag", "timedep", "rotating"})
    for (double eps : {1e-1, 1e-3}) {
      ErrorCheckReport r = covariance_error_check(builtin_model(m), eps);
      std::cerr << "  [2] " << m << " eps=" << eps << " K=" << r.K << " r=" << r.r << " M=" << r.M
                << " err=" << r.measured_error << " bound=" << r.bound << "\n";
      o.pass = o.pass && r.pass;
      worst = std::max(worst, r.measured_error / r.bound);
    }
  const double s = t.seconds();
  o.pass = o.pass && s <= 120.0;
  o.summary = "max measured/(eps sigma^2 dt) " + fmt("%.3g", worst) + ", " + fmt("%.1f", s) + " s (limit 120)";
  return o;
}

// ---- 3 ----
Outcome eigenvalue_containment() {
  Outcome o;
  int blocks = 0;
  double tight = 1e300;
  for (const char* m : {"const-diag", "timedep", "rotating"}) {
    SdeProblem p = builtin_model(m);
    const Bounds& b = p.bounds();
    const int r = std::max(1, static_cast<int>(std::ceil(4.0 * b.kappa_BBT * b.alpha_A * p.T() - 1e-9)));
    TimeGrid g(p.T(), r);
    for (int n = 0; n < r; ++n) {
      ContainmentReport c = covariance_containment(exact_sigma(p, g.t(n), g.t(n + 1), 32, 4), p, g.dt);
      o.pass = o.pass && c.pass;
      tight = std::min({tight, (c.min_eig - c.lower) / c.upper, (c.upper - c.max_eig) / c.upper});
      ++blocks;
    }
    std::cerr << "  [3] " << m << " r=" << r << "\n";
  }
  o.summary = std::to_string(blocks) + " blocks on 3 models, min relative margin " + fmt("%.3g", tight);
  return o;
}

// ---- 4 ----
Outcome inverse_norms() {
  Outcome o;
  double worst_exact = 0.0, worst_dyson = 0.0;
  int cases = 0;
  std::set<int> dims;
  for (const char* m : {"const-diag", "ou-diag", "rotating"}) {
    SdeProblem p = builtin_model(m);
    dims.insert(p.N());
    for (int r : {8, 32}) {
      TimeGrid g(p.T(), r);
      const double eta_dt = p.bounds().eta * g.dt;
      const double cond = 0.5 * eta_dt * std::exp(-eta_dt);
      KrmChoice k = choose_krm_phi(p, std::min(cond, 0.5));
      TimeGrid fine(p.T(), r, static_cast<int>(std::min(k.M, 4096.0)));
      DysonBlocks db = dyson_blocks(p, fine, k.K, true);
      std::vector<Mat> exact = exact_phi_blocks(p, g);
      double blk_err = 0.0;
      for (int n = 0; n < r; ++n) blk_err = std::max(blk_err, spectral_norm(db.at(n, 0) - exact[n]));
      o.pass = o.pass && blk_err <= cond;
      for (int R : {0, 8}) {
        NormBoundReport e = norm_bound_report(assemble(SystemKind::dyson, exact, R), p, true);
        NormBoundReport d =
            norm_bound_report(assemble(R > 0 ? SystemKind::dyson_padded : SystemKind::dyson, db.phi, R), p, false);
        std::cerr << "  [4] " << m << " r=" << r << " R=" << R << " exact " << e.norm_inv << "/" << e.bound_inv
                  << " dyson " << d.norm_inv << "/" << d.bound_inv << " block err " << blk_err << " <= " << cond
                  << "\n";
        o.pass = o.pass && e.pass && d.pass;
        worst_exact = std::max(worst_exact, e.norm_inv / e.bound_inv);
        worst_dyson = std::max(worst_dyson, d.norm_inv / d.bound_inv);
        ++cases;
      }
    }
  }
  o.pass = o.pass && dims.count(2) && dims.count(4);
  o.summary = std::to_string(cases) + " systems, max ||A^-1||/bound exact " + fmt("%.3g", worst_exact) +
              ", Dyson " + fmt("%.3g", worst_dyson);
  return o;
}

// ---- 5 ----
Outcome em_system_bounds() {
  Outcome o;
  int applicable = 0;
  std::set<int> rs;
  double worst = 0.0;
  for (const char* m : {"ou", "const-diag", "ou-diag", "ou-degenerate", "rotating", "timedep"}) {
    SdeProblem p = builtin_model(m);
    for (int r : {16, 64}) {
      EmNormReport e = em_norm_report(p, TimeGrid(p.T(), r));
      if (!e.applicable) {
        std::cerr << "  [5] " << m << " r=" << r << " skipped: " << e.reason << "\n";
        continue;
      }
      std::cerr << "  [5] " << m << " r=" << r << " ||A||=" << e.norm_A << " ||A^-1||=" << e.norm_inv << "/"
                << e.bound_inv << " cond=" << e.cond << "/" << e.bound_cond << "\n";
      o.pass = o.pass && e.pass;
      worst = std::max({worst, e.norm_A / e.bound_A, e.norm_inv / e.bound_inv, e.cond / e.bound_cond});
      ++applicable;
      rs.insert(r);
    }
  }
  o.pass = o.pass && rs.size() == 2;
  o.summary = std::to_string(applicable) + " applicable (model, r) pairs, max measured/bound " + fmt("%.3g", worst);
  return o;
}

// ---- 6 ----
Outcome em_strong_order() {
  Timer t;
  Outcome o;
  std::string s;
  for (const char* m : {"ou", "ou-degenerate"}) {
    StrongConvergenceReport r = strong_convergence(builtin_model(m), {8, 16, 32, 64, 128}, 200, PcgStream(kSeed, 6));
    std::cerr << "  [6] " << m << " slope " << r.slope << " c_st " << r.c_st << "\n";
    o.pass = o.pass && r.slope >= -1.2 && r.slope <= -0.8;
    s += std::string(s.empty() ? "" : ", ") + m + " " + fmt("%.3f", r.slope);
  }
  const double sec = t.seconds();
  o.pass = o.pass && sec <= 120.0;
  o.summary = "slopes " + s + ", " + fmt("%.1f", sec) + " s (limit 120)";
  return o;
}

// ---- 7 ----
Outcome history_deviation() {
  Outcome o;
  int checks = 0;
  double worst = 0.0;
  for (const char* m : {"ou", "ou-diag", "const-diag", "rotating"})
    for (double eps : {0.25, 0.1})
      for (bool padded : {false, true}) {
        HistoryOptions ho;
        ho.eps = eps;
        ho.padded = padded;
        ho.N_s = 20;
        ho.seed = kSeed;
        ho.stream_id = 7;
        HistoryContext ctx(builtin_model(m), ho);
        for (QlssMode mode : {QlssMode::honest, QlssMode::adversarial})
          for (std::uint64_t i = 1; i <= 20; ++i) {
            HistoryCheck c = ctx.verify(i, mode);
            o.pass = o.pass && c.pass();
            worst = std::max(worst, c.deviation / c.bound);
            ++checks;
          }
        std::cerr << "  [7] " << m << " eps=" << eps << (padded ? " padded" : "") << " K=" << ctx.plan().K_c
                  << " r=" << ctx.plan().r_c << " M_emu=" << ctx.plan().M_emu << "\n";
      }
  for (const char* m : {"ou", "ou-diag", "ou-degenerate"}) {
    SdeProblem p = builtin_model(m);
    const int r = em_min_steps(p);
    for (double eps : {0.25, 0.1}) {
      EmHistoryContext ctx(p, r, eps, choose_usn(r, p.m(), 20, 0.1).U_SN, PcgStream(kSeed, 7));
      for (QlssMode mode : {QlssMode::honest, QlssMode::adversarial})
        for (std::uint64_t i = 1; i <= 20; ++i) {
          EmHistoryCheck c = ctx.verify(i, mode);
          o.pass = o.pass && c.pass();
          worst = std::max(worst, c.deviation / c.bound);
          ++checks;
        }
    }
    std::cerr << "  [7] EM " << m << " r=" << r << "\n";
  }
  o.summary = std::to_string(checks) + " sample checks (Dyson plain/padded, EM), max deviation/(U_B eps) " +
              fmt("%.3g", worst);
  return o;
}

// ---- 8 ----
Outcome moment_bounds() {
  Outcome o;
  int checks = 0;
  double worst = 0.0;
  const PcgStream st(kSeed, 8);
  auto run = [&](const SdeProblem& p, MomentKind k, int d) {
    MomentReport r = moment_bound_check(p, k, d, 10000, 0, st);
    std::cerr << "  [8] " << p.name() << " " << to_string(k) << " d=" << d << " est " << r.estimate << " +- "
              << r.std_error << " bound " << r.bound << "\n";
    o.pass = o.pass && r.pass;
    worst = std::max(worst, r.estimate / r.bound);
    ++checks;
  };
  for (const char* m : {"ou", "ou-diag"})
    for (MomentKind k : {MomentKind::multi, MomentKind::terminal, MomentKind::multi_tilde, MomentKind::em,
                         MomentKind::em_tilde})
      for (int d : {1, 2}) run(builtin_model(m), k, d);
  for (MomentKind k : {MomentKind::em, MomentKind::em_tilde})
    for (int d : {1, 2}) run(builtin_model("ou-degenerate"), k, d);
  o.summary = std::to_string(checks) + " checks at N_s = 1e4, max estimate/bound " + fmt("%.3g", worst);
  return o;
}

double c_st_for(const SdeProblem& p) {
  return strong_convergence(p, {8, 16, 32}, 200, PcgStream(kSeed, 99)).c_st;
}

// ---- 9 ----
Outcome end_to_end() {
  Timer t;
  Outcome o;
  int worst_hits = 100, configs = 0;
  double worst_frac = 0.0;
  for (const char* m : {"ou", "ou-diag"}) {
    SdeProblem p = builtin_model(m);
    const double c_st = c_st_for(p);
    for (int d : {1, 2}) {
      ObservableTensor C = ObservableTensor::terminal_sum(d, p.N());
      const double eps_rel = d == 1 ? 0.5 : 1.0;
      for (EstimatorMode mode : {EstimatorMode::dyson_multi, EstimatorMode::dyson_terminal, EstimatorMode::em_multi}) {
        EstimationPlan pl;
        switch (mode) {
          case EstimatorMode::dyson_multi: pl = plan_multi_time(p, C, relative_eps_multi(p, C, eps_rel), 0.2); break;
          case EstimatorMode::dyson_terminal:
            pl = plan_terminal(p, C, relative_eps_terminal(p, C, eps_rel), 0.2);
            break;
          case EstimatorMode::em_multi: pl = plan_em_relative(p, C, eps_rel, 0.2, c_st); break;
        }
        EstimateOptions eo;
        eo.repeats = 100;
        eo.seed = kSeed;
        EstimateReport r = run_estimate(p, C, pl, eo);
        double max_err = 0.0, max_direct = 0.0;
        for (std::size_t k = 0; k < r.abs_error.size(); ++k) {
          max_err = std::max(max_err, r.abs_error[k]);
          max_direct = std::max(max_direct, std::fabs(r.y_hat[k] - r.truth));
        }
        std::cerr << "  [9] " << m << " " << to_string(mode) << " d=" << d << " N_s=" << pl.N_s << " r=" << pl.r
                  << " eps=" << pl.eps << " truth=" << r.truth << " within=" << r.within_eps << "/100"
                  << " max|mu-truth|=" << max_err << " max|Yhat-truth|=" << max_direct
                  << " history_ok=" << r.history_verified << "\n";
        o.pass = o.pass && r.within_eps >= 80 && r.history_verified;
        worst_hits = std::min(worst_hits, r.within_eps);
        worst_frac = std::max(worst_frac, max_err / pl.eps);
        ++configs;
      }
    }
  }
  const double s = t.seconds();
  o.pass = o.pass && s <= 600.0;
  o.summary = std::to_string(configs) + " configs x 100 repeats, min within-eps " + std::to_string(worst_hits) +
              "/100, max error/eps " + fmt("%.3g", worst_frac) + ", " + fmt("%.0f", s) + " s (limit 600)";
  return o;
}

// ---- 10 ----
Outcome concentration() {
  Outcome o;
  int checks = 0;
  double worst = 0.0;
  for (const char* m : {"ou", "ou-diag"}) {
    SdeProblem p = builtin_model(m);
    const double c_st = c_st_for(p);
    for (int d : {1, 2})
      for (EstimatorMode mode : {EstimatorMode::dyson_multi, EstimatorMode::dyson_terminal, EstimatorMode::em_multi}) {
        ConcentrationReport r = sample_average_bound_check(p, ObservableTensor::terminal_sum(d, p.N()), mode, 0.2,
                                                           1000, 200, PcgStream(kSeed, 10), 0, c_st);
        std::cerr << "  [10] " << m << " " << to_string(mode) << " d=" << d << " violations " << r.violations
                  << "/200 allowed freq " << r.allowed << " max err " << r.max_error << " bound " << r.bound << "\n";
        o.pass = o.pass && r.pass;
        worst = std::max(worst, r.frequency);
        ++checks;
      }
  }
  o.summary = std::to_string(checks) + " settings x 200 repeats at delta 0.2, max violation frequency " +
              fmt("%.3g", worst);
  return o;
}

// ---- 11 ----
Outcome khintchine() {
  Outcome o;
  int brute = 0;
  for (const auto& row : check_khintchine_bound(3, 5)) {
    o.pass = o.pass && row.pass && row.brute_checked && row.brute_match;
    brute += row.brute_checked;
  }
  for (int k = 1; k <= 6; ++k) o.pass = o.pass && count_even_tuples(k, 1) == 1 && count_even_tuples_brute(k, 1) == 1;
  o.summary = "15 (k, l) cells bounded, " + std::to_string(brute) + " matched by enumeration, l = 1 count 1 for k <= 6";
  return o;
}

// ---- 12 ----
double oracle_quantile(double u) {
  if (u > 0.5) return -oracle_quantile(1.0 - u);
  double lo = -40.0, hi = 0.0;
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    (0.5 * std::erfc(-mid / std::sqrt(2.0)) < u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Outcome prng() {
  Outcome o;
  std::mt19937_64 gen(kSeed);
  const PcgStream s(kSeed, 12);
  for (int k = 0; k < 50; ++k) {
    const std::uint64_t a = gen() >> 4, b = gen() % 5000;
    std::uint64_t st = jump_to(s, a);
    for (std::uint64_t j = 0; j < b; ++j) st = s.advance(st);
    o.pass = o.pass && st == jump_to(s, a + b);
  }
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    double u;
    if (k < 500) {
      u = (k + 0.5) / 500.0;
    } else {
      const double e = -15.0 + 14.0 * (k - 500) / 249.0;  // 1e-15 .. 1e-1 on both tails
      u = k < 750 ? std::pow(10.0, e) : 1.0 - std::pow(10.0, -15.0 + 14.0 * (k - 750) / 249.0);
    }
    worst = std::max(worst, std::fabs(inv_normal_cdf(u) - oracle_quantile(u)));
  }
  o.pass = o.pass && worst <= 1e-8;
  const std::size_t n = 100000;
  std::vector<double> z(n);
  fill_normals(PcgStream(kSeed, 13), 1, n, z.data());
  std::sort(z.begin(), z.end());
  double D = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double F = normal_cdf(z[i]);
    D = std::max({D, F - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - F});
  }
  const double ks = D * std::sqrt(static_cast<double>(n));
  o.pass = o.pass && ks < 1.6276;
  o.summary = "50 jumps consistent, max quantile error " + fmt("%.2g", worst) + " at 1000 points, KS sqrt(n) D " +
              fmt("%.3f", ks) + " (1% critical 1.628)";
  return o;
}

// ---- 13 ----
std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

Outcome determinism() {
  Outcome o;
  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"validate-bounds.csv", "validate-bounds --model rotating"},
      {"dyson-error.csv", "dyson-error --model timedep --eps 0.01"},
      {"covariance-error.csv", "covariance-error --model rotating --eps 0.1"},
      {"history.csv", "history --model ou-diag --eps 0.1 --samples 5 --qlss-mode adversarial"},
      {"history-em.csv", "history --model ou-degenerate --algorithm em --samples 5"},
      {"em-convergence.csv", "em-convergence --model ou --r-list 8,16,32 --paths 100"},
      {"estimate-multi.json", "estimate --model ou-diag --algorithm multi --eps-rel 0.5 --repeats 3"},
      {"estimate-terminal.json", "estimate --model ou --algorithm terminal --eps-rel 0.5 --repeats 3"},
      {"estimate-em.json", "estimate --model ou-degenerate --algorithm em --eps-rel 0.5 --repeats 3"},
      {"khintchine.csv", "check-khintchine --kmax 3 --lmax 5"},
      {"report.json", "report --model const-diag"},
  };
  const fs::path base = fs::temp_directory_path() / ("qsde_acceptance_" + std::to_string(::getpid()));
  int same = 0;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = base / ("run" + std::to_string(run));
    fs::create_directories(dir);
    for (const auto& [file, args] : cmds) {
      const std::string cmd = std::string("QSDE_SEED=") + std::to_string(kSeed) + " '" + QSDE_CLI_PATH + "' " + args +
                              " --out '" + (dir / file).string() + "' 2>/dev/null";
      const int rc = std::system(cmd.c_str());
      if (rc != 0) {
        std::cerr << "  [13] nonzero exit from: " << args << "\n";
        o.pass = false;
      }
    }
  }
  for (const auto& [file, args] : cmds) {
    const std::string a = slurp(base / "run0" / file), b = slurp(base / "run1" / file);
    const bool eq = !a.empty() && a == b;
    if (!eq) std::cerr << "  [13] outputs differ: " << file << "\n";
    o.pass = o.pass && eq;
    same += eq;
  }
  fs::remove_all(base);
  o.summary = std::to_string(same) + "/" + std::to_string(cmds.size()) + " CLI outputs byte-identical across two runs";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"Dyson truncation error", dyson_truncation},
      {"covariance approximation error", covariance_approximation},
      {"covariance eigenvalue containment", eigenvalue_containment},
      {"history-system inverse norms", inverse_norms},
      {"EM system norm and condition bounds", em_system_bounds},
      {"EM strong order", em_strong_order},
      {"history-state deviation", history_deviation},
      {"moment bounds", moment_bounds},
      {"end-to-end estimation", end_to_end},
      {"sample-average concentration", concentration},
      {"even-tuple counts and Khintchine bound", khintchine},
      {"PRNG jump-ahead, quantile accuracy, KS", prng},
      {"determinism of CLI outputs", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: qsde_acceptance [--only N[,N...]]\n";
      return 1;
    }
  }
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[k].first << ": " << o.summary
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
