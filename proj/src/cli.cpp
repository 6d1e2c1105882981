#include "qsde/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "qsde/combinatorics.hpp"
#include "qsde/csv.hpp"
#include "qsde/dyson.hpp"
#include "qsde/em.hpp"
#include "qsde/estimator.hpp"
#include "qsde/history.hpp"
#include "qsde/model.hpp"

namespace qsde {

namespace {

using nlohmann::json;

enum class KeyType { real, integer, u64, text, flag, any };

struct KeySpec {
  const char* name;
  KeyType type;
  const char* help;
};

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"model", KeyType::any, "built-in model name or problem JSON file"},
      {"eps", KeyType::real, "target accuracy"},
      {"eps_rel", KeyType::real, "relative accuracy (estimate); overrides eps"},
      {"delta", KeyType::real, "failure probability"},
      {"seed", KeyType::u64, "PRNG seed"},
      {"stream_id", KeyType::u64, "PRNG stream id"},
      {"r", KeyType::integer, "number of time steps"},
      {"R", KeyType::integer, "padding length (history --algorithm terminal)"},
      {"k_offset", KeyType::integer, "added to the chosen truncation order K (dyson-error)"},
      {"repeats", KeyType::integer, "independent estimation runs"},
      {"qlss_mode", KeyType::text, "honest or adversarial"},
      {"algorithm", KeyType::text, "multi, terminal or em"},
      {"observable", KeyType::any, "observable JSON (inline or file)"},
      {"d", KeyType::integer, "order of the default observable"},
      {"overlap", KeyType::text, "exact or shot"},
      {"c_st", KeyType::real, "EM strong-error constant; estimated when absent"},
      {"samples", KeyType::integer, "number of samples"},
      {"paths", KeyType::integer, "coupled paths (em-convergence)"},
      {"r_list", KeyType::text, "comma separated step counts (em-convergence)"},
      {"kmax", KeyType::integer, "largest k (check-khintchine)"},
      {"lmax", KeyType::integer, "largest l (check-khintchine)"},
      {"out", KeyType::text, "output file; stdout when absent"},
  };
  return specs;
}

std::string flag_name(const std::string& key) {
  if (key == "R") return "--pad";
  std::string f = "--" + key;
  for (char& c : f)
    if (c == '_') c = '-';
  return f;
}

/// Merged configuration: defaults < config file < QSDE_SEED < flags.
class Params {
 public:
  explicit Params(json j) : j_(std::move(j)) {}

  bool has(const char* k) const { return j_.contains(k) && !j_.at(k).is_null(); }
  double real(const char* k, double def) const { return has(k) ? get<double>(k) : def; }
  int integer(const char* k, int def) const { return has(k) ? get<int>(k) : def; }
  std::uint64_t u64(const char* k, std::uint64_t def) const { return has(k) ? get<std::uint64_t>(k) : def; }
  std::string text(const char* k, const std::string& def) const { return has(k) ? get<std::string>(k) : def; }
  bool flag(const char* k) const { return has(k) && get<bool>(k); }
  const json& raw(const char* k) const { return j_.at(k); }

 private:
  template <class T>
  T get(const char* k) const {
    try {
      return j_.at(k).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("config value '") + k + "' has the wrong type");
    }
  }
  json j_;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in '" + path + "': " + e.what());
  }
}

json convert_flag(const KeySpec& k, const std::string& v) {
  try {
    switch (k.type) {
      case KeyType::real: return std::stod(v);
      case KeyType::integer: return std::stoi(v);
      case KeyType::u64: return static_cast<std::uint64_t>(std::stoull(v));
      case KeyType::text:
      case KeyType::any: return v;
      case KeyType::flag: return true;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("cannot parse value '" + v + "' for " + flag_name(k.name));
}

SdeProblem resolve_model(const Params& p) {
  if (!p.has("model")) return builtin_model("ou");
  const json& m = p.raw("model");
  if (m.is_object()) return load_problem(m);
  if (!m.is_string()) throw ConfigError("model must be a name, a file path or an object");
  const std::string s = m.get<std::string>();
  for (const auto& n : builtin_model_names())
    if (n == s) return builtin_model(s);
  if (s.size() > 5 && s.substr(s.size() - 5) == ".json") return load_problem_file(s);
  throw ConfigError("unknown model '" + s + "'");
}

ObservableTensor resolve_observable(const Params& p, int N) {
  if (!p.has("observable")) return ObservableTensor::terminal_power(p.integer("d", 1), N, 0);
  const json& o = p.raw("observable");
  if (o.is_object()) return ObservableTensor::from_json(o, N);
  if (!o.is_string()) throw ConfigError("observable must be JSON text, a file path or an object");
  const std::string s = o.get<std::string>();
  if (!s.empty() && s.front() == '{') {
    try {
      return ObservableTensor::from_json(json::parse(s), N);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed observable JSON: ") + e.what());
    }
  }
  return ObservableTensor::from_json(read_json_file(s), N);
}

void emit(const Params& p, const std::string& text) {
  const std::string out = p.text("out", "");
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw ConfigError("cannot open output file '" + out + "'");
  f << text;
  if (!f) throw ConfigError("failed writing '" + out + "'");
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::string b2s(bool b) { return b ? "true" : "false"; }

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad integer '" + item + "' in list");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

// ---- subcommands ----

int cmd_validate_bounds(const Params& prm) {
  SdeProblem p = resolve_model(prm);
  BoundsReport rep = validate_bounds(p, prm.integer("samples", 64));
  const Bounds& b = p.bounds();
  CsvWriter w({"model", "quantity", "measured", "declared", "pass"});
  auto add = [&](const char* q, double m, double d, bool ok) { w.row({p.name(), q, fmt17(m), fmt17(d), b2s(ok)}); };
  add("norm_A", rep.max_norm_A, b.alpha_A, rep.max_norm_A <= b.alpha_A * (1 + 1e-9));
  add("log_norm_A", rep.max_log_norm_A, -b.eta, rep.max_log_norm_A <= -b.eta + 1e-9 * b.alpha_A);
  add("max_eig_BBt", rep.max_eig_BBt, b.sigma * b.sigma, rep.max_eig_BBt <= b.sigma * b.sigma * (1 + 1e-9));
  if (rep.dyson_mode)
    add("min_eig_BBt", rep.min_eig_BBt, b.sigma * b.sigma / b.kappa_BBT,
        rep.min_eig_BBt >= b.sigma * b.sigma / b.kappa_BBT * (1 - 1e-9));
  for (const auto& v : rep.violations)
    std::cerr << "violation: " << v.what << " at t=" << v.t << " measured " << v.measured << " declared " << v.declared
              << "\n";
  emit(prm, w.str());
  return rep.pass() ? kExitOk : kExitBound;
}

void emit_error_report(const Params& prm, const ErrorCheckReport& r) {
  CsvWriter w({"model", "eps", "K", "r", "M", "measured_error", "bound", "pass"});
  w.row({r.model, fmt17(r.eps_target), std::to_string(r.K), std::to_string(r.r), fmt17(r.M), fmt17(r.measured_error),
         fmt17(r.bound), b2s(r.pass)});
  emit(prm, w.str());
}

int cmd_dyson_error(const Params& prm) {
  SdeProblem p = resolve_model(prm);
  ErrorCheckReport r = dyson_error_bound_check(p, prm.real("eps", 1e-2), prm.integer("k_offset", 0));
  emit_error_report(prm, r);
  return r.pass ? kExitOk : kExitBound;
}

int cmd_covariance_error(const Params& prm) {
  SdeProblem p = resolve_model(prm);
  ErrorCheckReport r = covariance_error_check(p, prm.real("eps", 1e-1), prm.integer("r", 0));
  emit_error_report(prm, r);
  return r.pass ? kExitOk : kExitBound;
}

int cmd_history(const Params& prm, std::uint64_t seed) {
  SdeProblem p = resolve_model(prm);
  const std::string alg = prm.text("algorithm", "multi");
  const EstimatorMode mode = parse_estimator_mode(alg);
  const QlssMode q = parse_qlss_mode(prm.text("qlss_mode", "honest"));
  const double eps = prm.real("eps", 0.1);
  const int samples = prm.integer("samples", 5);
  if (samples < 1) throw ConfigError("samples must be >= 1");
  const std::uint64_t sid = prm.u64("stream_id", 1);
  CsvWriter w({"model", "algorithm", "qlss_mode", "sample", "deviation", "bound", "pass"});
  bool all = true;
  if (mode == EstimatorMode::em_multi) {
    const int r = prm.integer("r", em_min_steps(p));
    const double usn = choose_usn(r, p.m(), samples, prm.real("delta", 0.1)).U_SN;
    EmHistoryContext ctx(p, r, eps, usn, PcgStream(seed, sid));
    for (int i = 1; i <= samples; ++i) {
      EmHistoryCheck c = ctx.verify(i, q);
      all = all && c.pass();
      w.row({p.name(), alg, to_string(q), std::to_string(i), fmt17(c.deviation), fmt17(c.bound), b2s(c.pass())});
    }
  } else {
    HistoryOptions ho;
    ho.eps = eps;
    ho.padded = mode == EstimatorMode::dyson_terminal;
    ho.R = prm.integer("R", -1);
    ho.N_s = samples;
    ho.delta = prm.real("delta", 0.1);
    ho.seed = seed;
    ho.stream_id = sid;
    HistoryContext ctx(p, ho);
    for (int i = 1; i <= samples; ++i) {
      HistoryCheck c = ctx.verify(i, q);
      all = all && c.pass();
      w.row({p.name(), alg, to_string(q), std::to_string(i), fmt17(c.deviation), fmt17(c.bound), b2s(c.pass())});
    }
  }
  emit(prm, w.str());
  return all ? kExitOk : kExitBound;
}

int cmd_em_convergence(const Params& prm, std::uint64_t seed) {
  SdeProblem p = resolve_model(prm);
  std::vector<int> rl = parse_int_list(prm.text("r_list", "8,16,32,64,128"));
  StrongConvergenceReport rep =
      strong_convergence(p, rl, prm.integer("paths", 200), PcgStream(seed, prm.u64("stream_id", 3)));
  const bool ok = rep.slope >= -1.2 && rep.slope <= -0.8;
  CsvWriter w({"model", "r", "rms_error", "slope", "c_st", "pass"});
  for (std::size_t k = 0; k < rep.r_list.size(); ++k)
    w.row({p.name(), std::to_string(rep.r_list[k]), fmt17(rep.rms_error[k]), fmt17(rep.slope), fmt17(rep.c_st),
           b2s(ok)});
  emit(prm, w.str());
  return ok ? kExitOk : kExitBound;
}

double estimate_c_st(const SdeProblem& p, std::uint64_t seed) {
  return strong_convergence(p, {8, 16, 32}, 200, PcgStream(seed, 99)).c_st;
}

int cmd_estimate(const Params& prm, std::uint64_t seed) {
  SdeProblem p = resolve_model(prm);
  const EstimatorMode mode = parse_estimator_mode(prm.text("algorithm", "multi"));
  ObservableTensor C = resolve_observable(prm, p.N());
  const double delta = prm.real("delta", 0.2);
  EstimationPlan plan;
  json extra;
  if (mode == EstimatorMode::em_multi) {
    const double c_st = prm.has("c_st") ? prm.real("c_st", 0.0) : estimate_c_st(p, seed);
    if (prm.has("eps_rel")) {
      plan = plan_em_relative(p, C, prm.real("eps_rel", 0.5), delta, c_st);
    } else {
      plan = plan_em(p, C, prm.real("eps", 0.5), delta, c_st);
    }
  } else {
    double eps = prm.real("eps", 0.5);
    if (prm.has("eps_rel")) {
      eps = mode == EstimatorMode::dyson_multi ? relative_eps_multi(p, C, prm.real("eps_rel", 0.5))
                                               : relative_eps_terminal(p, C, prm.real("eps_rel", 0.5));
    }
    plan = mode == EstimatorMode::dyson_multi ? plan_multi_time(p, C, eps, delta) : plan_terminal(p, C, eps, delta);
  }
  EstimateOptions opt;
  const std::string ov = prm.text("overlap", "shot");
  if (ov != "shot" && ov != "exact") throw ConfigError("overlap must be exact or shot");
  opt.overlap = ov == "exact" ? OverlapMode::exact : OverlapMode::shot;
  opt.qlss = parse_qlss_mode(prm.text("qlss_mode", "honest"));
  opt.seed = seed;
  opt.stream_id = prm.u64("stream_id", 7);
  opt.repeats = prm.integer("repeats", 1);
  EstimateReport rep = run_estimate(p, C, plan, opt);
  json j = rep.to_json();
  j["model"] = p.name();
  j["observable"] = C.to_json();
  emit(prm, dump(j));
  return rep.history_verified || !opt.verify_first_sample ? kExitOk : kExitBound;
}

int cmd_check_khintchine(const Params& prm) {
  const auto rows = check_khintchine_bound(prm.integer("kmax", 3), prm.integer("lmax", 5));
  CsvWriter w({"k", "l", "count", "bound", "brute_checked", "brute_match", "pass"});
  bool all = true;
  for (const auto& r : rows) {
    all = all && r.pass;
    w.row({std::to_string(r.k), std::to_string(r.l), to_decimal(r.count), to_decimal(r.bound), b2s(r.brute_checked),
           b2s(r.brute_match), b2s(r.pass)});
  }
  emit(prm, w.str());
  return all ? kExitOk : kExitBound;
}

int cmd_report(const Params& prm) {
  SdeProblem p = resolve_model(prm);
  json j;
  j["model"] = p.name();
  bool all = true;
  BoundsReport br = validate_bounds(p, prm.integer("samples", 64));
  j["bounds"] = {{"pass", br.pass()}, {"violations", br.violations.size()}};
  all = all && br.pass();
  ErrorCheckReport de = dyson_error_bound_check(p, 1e-2);
  j["dyson_error"] = {{"eps", de.eps_target}, {"K", de.K}, {"r", de.r}, {"M", de.M},
                      {"measured", de.measured_error}, {"pass", de.pass}};
  all = all && de.pass;
  if (p.full_rank_noise()) {
    ErrorCheckReport ce = covariance_error_check(p, 1e-1);
    j["covariance_error"] = {{"eps", ce.eps_target}, {"r", ce.r}, {"measured", ce.measured_error},
                             {"bound", ce.bound}, {"pass", ce.pass}};
    all = all && ce.pass;
    const int r = std::max(1, static_cast<int>(std::ceil(4.0 * p.bounds().kappa_BBT * p.bounds().alpha_A * p.T() - 1e-9)));
    const TimeGrid g(p.T(), r);
    bool contain = true;
    for (int n = 0; n < r; ++n) contain = contain && covariance_containment(exact_sigma(p, g.t(n), g.t(n + 1)), p, g.dt).pass;
    j["containment"] = {{"r", r}, {"pass", contain}};
    all = all && contain;
    if (p.N() * (r + 1) <= 4096) {
      NormBoundReport nb = norm_bound_report(assemble(SystemKind::dyson, exact_phi_blocks(p, g), 0), p, true);
      j["inverse_norm"] = {{"r", r}, {"norm_inv", nb.norm_inv}, {"bound", nb.bound_inv}, {"pass", nb.pass}};
      all = all && nb.pass;
    }
  } else {
    j["covariance_error"] = "skipped: noise covariance not declared full rank";
  }
  const int r_em = em_min_steps(p);
  EmNormReport em = em_norm_report(p, TimeGrid(p.T(), r_em));
  j["em_system"] = {{"r", r_em}, {"applicable", em.applicable}, {"pass", em.pass}};
  if (em.applicable) all = all && em.pass;
  bool kh = true;
  for (const auto& row : check_khintchine_bound(3, 5)) kh = kh && row.pass;
  j["khintchine"] = {{"kmax", 3}, {"lmax", 5}, {"pass", kh}};
  all = all && kh;
  j["pass"] = all;
  emit(prm, dump(j));
  return all ? kExitOk : kExitBound;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Classical emulation of quantum SDE expectation estimators"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON configuration file; flags override it");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"validate-bounds", "check declared bound constants against sampled matrices"},
      {"dyson-error", "truncated Dyson propagator error against its target"},
      {"covariance-error", "approximate noise covariance error against its target"},
      {"history", "pathwise history-state deviation"},
      {"em-convergence", "strong convergence order of Euler-Maruyama"},
      {"estimate", "run an expectation estimator"},
      {"check-khintchine", "even-tuple counts against the (2k-1)!! l^k bound"},
      {"report", "summary of all bound checks for a model"},
  };
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> opts;
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON configuration file; flags override it");
    for (const auto& k : key_specs()) {
      const std::string key = std::string(name) + "/" + k.name;
      opts[key] = sub->add_option(flag_name(k.name), values[key], k.help);
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  CLI::App* sub = nullptr;
  for (auto* s : subs)
    if (s->parsed()) sub = s;
  const std::string cmd = sub->get_name();

  try {
    json merged = json::object();
    if (!config_path.empty()) {
      json cfg = read_json_file(config_path);
      if (!cfg.is_object()) throw ConfigError("config must be a JSON object");
      for (const auto& [k, v] : cfg.items()) {
        bool known = false;
        for (const auto& s : key_specs()) known = known || k == s.name;
        if (!known) throw ConfigError("unknown config key '" + k + "'");
        merged[k] = v;
      }
    }
    if (const char* env = std::getenv("QSDE_SEED")) {
      try {
        merged["seed"] = static_cast<std::uint64_t>(std::stoull(env));
      } catch (const std::exception&) {
        throw ConfigError(std::string("QSDE_SEED is not an unsigned integer: ") + env);
      }
    }
    for (const auto& k : key_specs()) {
      const std::string key = cmd + "/" + k.name;
      if (opts[key]->count() > 0) merged[k.name] = convert_flag(k, values[key]);
    }
    Params prm(merged);
    const std::uint64_t seed = prm.u64("seed", 20240601ULL);

    if (cmd == "validate-bounds") return cmd_validate_bounds(prm);
    if (cmd == "dyson-error") return cmd_dyson_error(prm);
    if (cmd == "covariance-error") return cmd_covariance_error(prm);
    if (cmd == "history") return cmd_history(prm, seed);
    if (cmd == "em-convergence") return cmd_em_convergence(prm, seed);
    if (cmd == "estimate") return cmd_estimate(prm, seed);
    if (cmd == "check-khintchine") return cmd_check_khintchine(prm);
    if (cmd == "report") return cmd_report(prm);
    std::cerr << "error: unknown command\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BoundViolation& e) {
    std::cerr << "bound failure: " << e.what() << "\n";
    return kExitBound;
  } catch (const Infeasible& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kExitBound;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace qsde
