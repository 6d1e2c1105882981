#include <doctest.h>

#include <cmath>

#include "qsde/combinatorics.hpp"
#include "qsde/errors.hpp"

using namespace qsde;

TEST_CASE("even-tuple counts: small cases") {
  for (int k = 1; k <= 6; ++k) CHECK(count_even_tuples(k, 1) == 1);
  CHECK(count_even_tuples(1, 2) == 2);
  CHECK(count_even_tuples(2, 2) == 8);
  // k = 1: only doubled singletons
  for (int l = 1; l <= 8; ++l) CHECK(count_even_tuples(1, l) == static_cast<Count>(l));
  // k = 2: aaaa (l) plus two distinct pairs 3 l (l - 1)
  for (int l = 1; l <= 8; ++l) CHECK(count_even_tuples(2, l) == static_cast<Count>(l + 3 * l * (l - 1)));
}

TEST_CASE("binomial identity agrees with enumeration") {
  for (int k = 1; k <= 6; ++k)
    for (int l = 1; l <= 8; ++l) {
      if (std::pow(static_cast<double>(l), 2 * k) > (1 << 24)) continue;
      CAPTURE(k);
      CAPTURE(l);
      CHECK(count_even_tuples(k, l) == count_even_tuples_brute(k, l));
    }
}

TEST_CASE("double factorial and the bound table") {
  CHECK(double_factorial(1) == 1);
  CHECK(double_factorial(6) == 10395);
  auto rows = check_khintchine_bound(3, 5);
  CHECK(rows.size() == 15);
  for (const auto& r : rows) {
    CHECK(r.pass);
    CHECK(r.brute_match);
    CHECK(r.count <= r.bound);
    if (r.k == 1) CHECK(r.count == r.bound);
  }
  auto full = check_khintchine_bound(6, 8);
  for (const auto& r : full) CHECK(r.pass);
  CHECK(to_decimal(double_factorial(6) * 262144) == "2724986880");
  CHECK(to_decimal(0) == "0");
}

TEST_CASE("out-of-range arguments") {
  CHECK_THROWS_AS(count_even_tuples(0, 2), InvalidInput);
  CHECK_THROWS_AS(count_even_tuples(7, 2), InvalidInput);
  CHECK_THROWS_AS(count_even_tuples(2, 9), InvalidInput);
  CHECK_THROWS_AS(count_even_tuples_brute(6, 8), InvalidInput);
}
