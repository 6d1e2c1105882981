#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qsde {

using Count = unsigned __int128;

/// Number of length-2k tuples over {0, ..., l-1} in which every symbol occurs an even number of times,
/// from (1/2^l) sum_s C(l, s) (2s - l)^{2k}. Requires 1 <= k <= 6 and 1 <= l <= 8.
Count count_even_tuples(int k, int l);
/// Same count by direct enumeration of all l^{2k} tuples; requires l^{2k} <= 2^24.
Count count_even_tuples_brute(int k, int l);
/// (2k - 1)!! exactly.
Count double_factorial(int k);

struct KhintchineRow {
  int k = 0, l = 0;
  Count count = 0;
  Count bound = 0;           ///< (2k - 1)!! l^k
  bool brute_checked = false;
  bool brute_match = true;
  bool pass = false;
};

std::vector<KhintchineRow> check_khintchine_bound(int k_max, int l_max);

/// Decimal string of a 128-bit count.
std::string to_decimal(Count v);

}  // namespace qsde
