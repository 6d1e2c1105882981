#include "qsde/combinatorics.hpp"

#include <algorithm>
#include <cmath>

#include "qsde/errors.hpp"

namespace qsde {

namespace {

void check_range(int k, int l) {
  if (k < 1 || k > 6 || l < 1 || l > 8) throw InvalidInput("count_even_tuples needs 1 <= k <= 6 and 1 <= l <= 8");
}

Count binom(int n, int s) {
  Count c = 1;
  for (int j = 1; j <= s; ++j) c = c * (n - s + j) / j;
  return c;
}

}  // namespace

Count double_factorial(int k) {
  if (k < 0) throw InvalidInput("double_factorial needs k >= 0");
  Count f = 1;
  for (int j = 2 * k - 1; j > 1; j -= 2) f *= j;
  return f;
}

Count count_even_tuples(int k, int l) {
  check_range(k, l);
  // (2s - l)^{2k} is even in (2s - l), so only |2s - l| matters
  Count sum = 0;
  for (int s = 0; s <= l; ++s) {
    Count p = 1;
    const Count base = static_cast<Count>(std::abs(2 * s - l));
    for (int j = 0; j < 2 * k; ++j) p *= base;
    sum += binom(l, s) * p;
  }
  return sum >> l;
}

Count count_even_tuples_brute(int k, int l) {
  check_range(k, l);
  const int len = 2 * k;
  double total = std::pow(static_cast<double>(l), len);
  if (total > (1 << 24)) throw InvalidInput("enumeration range exceeds 2^24 tuples");
  std::vector<int> t(len, 0), occ(l, 0);
  occ[0] = len;
  Count hits = 0;
  for (;;) {
    bool even = true;
    for (int c : occ)
      if (c % 2) {
        even = false;
        break;
      }
    if (even) ++hits;
    int pos = 0;
    while (pos < len) {
      --occ[t[pos]];
      if (++t[pos] < l) {
        ++occ[t[pos]];
        break;
      }
      t[pos] = 0;
      ++occ[0];
      ++pos;
    }
    if (pos == len) break;
  }
  return hits;
}

std::vector<KhintchineRow> check_khintchine_bound(int k_max, int l_max) {
  if (k_max < 1 || k_max > 6 || l_max < 1 || l_max > 8) throw InvalidInput("k_max must be in [1, 6], l_max in [1, 8]");
  std::vector<KhintchineRow> rows;
  for (int k = 1; k <= k_max; ++k)
    for (int l = 1; l <= l_max; ++l) {
      KhintchineRow row;
      row.k = k;
      row.l = l;
      row.count = count_even_tuples(k, l);
      Count lk = 1;
      for (int j = 0; j < k; ++j) lk *= l;
      row.bound = double_factorial(k) * lk;
      // 2k lg l <= 24
      if (2.0 * k * std::log2(static_cast<double>(l)) <= 24.0) {
        row.brute_checked = true;
        row.brute_match = count_even_tuples_brute(k, l) == row.count;
      }
      row.pass = row.brute_match && row.count <= row.bound;
      rows.push_back(row);
    }
  return rows;
}

std::string to_decimal(Count v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  std::reverse(s.begin(), s.end());
  return s;
}

}  // namespace qsde
