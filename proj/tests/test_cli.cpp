#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "qsde/cli.hpp"

using namespace qsde;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  fs::path d = fs::temp_directory_path() / "qsde_cli_tests";
  fs::create_directories(d);
  return d / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "qsde");
  return run_cli(args);
}

}  // namespace

TEST_CASE("exit codes") {
  const std::string out = tmp("k.csv").string();
  CHECK(run({"validate-bounds", "--model", "ou", "--out", out}) == kExitOk);
  CHECK(run({"check-khintchine", "--kmax", "3", "--lmax", "5", "--out", out}) == kExitOk);
  std::string csv = slurp(out);
  CHECK(csv.rfind("k,l,count,bound", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 16);
  CHECK(run({"validate-bounds", "--model", "nope"}) == kExitConfig);
  CHECK(run({"validate-bounds", "--bogus-flag", "1"}) == kExitConfig);
  CHECK(run({}) == kExitConfig);
  CHECK(run({"estimate", "--model", "ou", "--eps", "-1"}) == kExitConfig);
  CHECK(run({"check-khintchine", "--kmax", "9"}) == kExitConfig);
  // mode gating: rank-deficient noise only runs with EM
  CHECK(run({"estimate", "--model", "ou-degenerate", "--algorithm", "multi", "--eps-rel", "0.5", "--out", out}) ==
        kExitBound);
  CHECK(run({"estimate", "--model", "ou-degenerate", "--algorithm", "em", "--eps-rel", "0.5", "--c-st", "0.5",
             "--out", out}) == kExitOk);
  // eps' above 1/3
  CHECK(run({"estimate", "--model", "ou", "--algorithm", "multi", "--eps", "1000", "--out", out}) == kExitBound);
}

TEST_CASE("config file, flag precedence and the seed variable") {
  const fs::path cfg = tmp("cfg.json"), bad = tmp("bad.json");
  const std::string a = tmp("a.json").string(), b = tmp("b.json").string(), c = tmp("c.json").string();
  std::ofstream(cfg) << R"({"model": "ou", "algorithm": "em", "eps_rel": 0.5, "c_st": 0.5, "seed": 5, "repeats": 2})";
  std::ofstream(bad) << R"({"model": "ou", "colour": "blue"})";
  CHECK(run({"estimate", "--config", bad.string()}) == kExitConfig);

  ::unsetenv("QSDE_SEED");
  REQUIRE(run({"estimate", "--config", cfg.string(), "--out", a}) == kExitOk);
  REQUIRE(run({"estimate", "--config", cfg.string(), "--seed", "5", "--out", b}) == kExitOk);
  CHECK(slurp(a) == slurp(b));
  REQUIRE(run({"estimate", "--config", cfg.string(), "--seed", "6", "--out", c}) == kExitOk);
  CHECK(slurp(a) != slurp(c));
  auto ja = nlohmann::json::parse(slurp(a));
  CHECK(ja["repeats"] == 2);
  CHECK(ja["plan"]["mode"] == "em");

  // flag overrides config
  REQUIRE(run({"estimate", "--config", cfg.string(), "--repeats", "3", "--out", b}) == kExitOk);
  CHECK(nlohmann::json::parse(slurp(b))["repeats"] == 3);

  // environment overrides the config seed but not an explicit flag
  ::setenv("QSDE_SEED", "6", 1);
  REQUIRE(run({"estimate", "--config", cfg.string(), "--out", b}) == kExitOk);
  CHECK(slurp(b) == slurp(c));
  REQUIRE(run({"estimate", "--config", cfg.string(), "--seed", "5", "--out", b}) == kExitOk);
  CHECK(slurp(b) == slurp(a));
  ::setenv("QSDE_SEED", "x", 1);
  CHECK(run({"estimate", "--config", cfg.string(), "--out", b}) == kExitConfig);
  ::unsetenv("QSDE_SEED");
}

TEST_CASE("repeated runs are byte-identical") {
  const std::vector<std::vector<std::string>> cmds = {
      {"history", "--model", "ou", "--eps", "0.25", "--samples", "3"},
      {"history", "--model", "ou-degenerate", "--algorithm", "em", "--qlss-mode", "adversarial", "--samples", "3"},
      {"dyson-error", "--model", "rotating", "--eps", "0.01"},
      {"em-convergence", "--model", "ou", "--r-list", "8,16,32", "--paths", "50"},
  };
  int k = 0;
  for (auto cmd : cmds) {
    CAPTURE(cmd[0]);
    const std::string x = tmp("x" + std::to_string(k)).string(), y = tmp("y" + std::to_string(k)).string();
    ++k;
    auto c1 = cmd, c2 = cmd;
    c1.insert(c1.end(), {"--out", x});
    c2.insert(c2.end(), {"--out", y});
    REQUIRE(run(c1) == kExitOk);
    REQUIRE(run(c2) == kExitOk);
    CHECK(slurp(x) == slurp(y));
    CHECK(!slurp(x).empty());
  }
}

TEST_CASE("CSV cells carry 17 significant digits") {
  const std::string out = tmp("d.csv").string();
  REQUIRE(run({"dyson-error", "--model", "timedep", "--eps", "0.01", "--out", out}) == kExitOk);
  std::string csv = slurp(out);
  std::istringstream is(csv);
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  CHECK(header == "model,eps,K,r,M,measured_error,bound,pass");
  // measured_error column
  std::vector<std::string> cells;
  std::stringstream rs(row);
  for (std::string cell; std::getline(rs, cell, ',');) cells.push_back(cell);
  REQUIRE(cells.size() == 8);
  const std::string& m = cells[5];
  std::size_t digits = 0;
  for (char ch : m.substr(0, m.find('e'))) digits += std::isdigit(static_cast<unsigned char>(ch)) ? 1 : 0;
  CHECK(digits >= 16);
  CHECK(std::stod(m) < 0.01);
}
