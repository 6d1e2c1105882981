#include "qsde/prng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qsde {

std::uint64_t PcgStream::initial_state() const {
  std::uint64_t st = advance(0);
  st += seed;
  return advance(st);
}

std::uint64_t jump_to(const PcgStream& s, std::uint64_t i) {
  std::uint64_t cur_mult = PcgStream::kMultiplier, cur_plus = s.increment();
  std::uint64_t acc_mult = 1, acc_plus = 0;
  while (i > 0) {
    if (i & 1u) {
      acc_mult *= cur_mult;
      acc_plus = acc_plus * cur_mult + cur_plus;
    }
    cur_plus = (cur_mult + 1) * cur_plus;
    cur_mult *= cur_mult;
    i >>= 1u;
  }
  return acc_mult * s.initial_state() + acc_plus;
}

std::uint32_t pcg_output(std::uint64_t state) {
  const auto xorshifted = static_cast<std::uint32_t>(((state >> 18u) ^ state) >> 27u);
  const auto rot = static_cast<std::uint32_t>(state >> 59u);
  return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
}

namespace {

double uniform_from_state(const PcgStream& s, std::uint64_t& st) {
  const std::uint64_t hi = pcg_output(st) >> 5u;
  st = s.advance(st);
  const std::uint64_t lo = pcg_output(st) >> 6u;
  st = s.advance(st);
  const double u = static_cast<double>((hi << 26u) | lo) * 0x1.0p-53;
  return u == 0.0 ? 0x1.0p-53 : u;
}

}  // namespace

double uniform_at(const PcgStream& s, std::uint64_t i) {
  if (i == 0) throw InvalidInput("sample index is 1-based");
  std::uint64_t st = jump_to(s, 2 * (i - 1));
  return uniform_from_state(s, st);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Wichura, AS241 (PPND16): relative accuracy about 1e-16, no refinement needed.
double inv_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidInput("inv_normal_cdf needs 0 < u < 1");
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
             133.14166789178437745) * r + 3.387132872796366608) /
           (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
             42.313330701600911252) * r + 1.0);
  }
  double r = std::sqrt(-std::log(q < 0.0 ? p : 1.0 - p));
  double x;
  if (r <= 5.0) {
    r -= 1.6;
    x = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
             1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
          4.6303378461565452959) * r + 1.42343711074968357734) /
        (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
             0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
          2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
             0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
          5.4637849111641143699) * r + 6.6579046435011037772) /
        (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
             7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
          0.59983220655588793769) * r + 1.0);
  }
  return q < 0.0 ? -x : x;
}

double std_normal(const PcgStream& s, std::uint64_t i) { return inv_normal_cdf(uniform_at(s, i)); }

void fill_normals(const PcgStream& s, std::uint64_t first, std::size_t count, double* out) {
  NormalCursor(s, first).fill(count, out);
}

NormalCursor::NormalCursor(const PcgStream& s, std::uint64_t first) : s_(s), next_(first) {
  if (first == 0) throw InvalidInput("sample index is 1-based");
  state_ = jump_to(s, 2 * (first - 1));
}

void NormalCursor::fill(std::size_t count, double* out) {
  for (std::size_t k = 0; k < count; ++k) out[k] = inv_normal_cdf(uniform_from_state(s_, state_));
  next_ += count;
}

Vec noise_vector(const PcgStream& s, std::uint64_t i, int n, int w, int r) {
  if (i == 0 || n < 0 || n >= r || w < 1) throw InvalidInput("noise_vector: index out of range");
  Vec z(w);
  const std::uint64_t first = (i - 1) * static_cast<std::uint64_t>(r) * w + static_cast<std::uint64_t>(n) * w + 1;
  fill_normals(s, first, w, z.data());
  return z;
}

ClipBound choose_usn(double r, double width, double N_s, double delta) {
  if (!(r > 0 && width > 0 && N_s > 0 && delta > 0 && delta < 1)) throw InvalidInput("choose_usn: bad arguments");
  const double arg = 2.0 * r * width * N_s / (std::sqrt(2.0 * std::numbers::pi) * delta);
  if (arg <= 1.0) return {1.0};
  return {std::max(std::sqrt(2.0 * std::log(arg)), 1.0)};
}

}  // namespace qsde
