#pragma once

#include <cstddef>
#include <cstdint>

#include "qsde/linalg.hpp"

namespace qsde {

/// PCG stream: 64-bit LCG state, XSH-RR 32-bit output.
/// Element i is a pure function of (seed, stream_id, i).
struct PcgStream {
  static constexpr std::uint64_t kMultiplier = 6364136223846793005ULL;

  std::uint64_t seed = 0x853c49e6748fea9bULL;
  std::uint64_t stream_id = 0xda3e39cb94b95bdbULL;

  PcgStream() = default;
  PcgStream(std::uint64_t s, std::uint64_t id) : seed(s), stream_id(id) {}

  std::uint64_t increment() const { return (stream_id << 1u) | 1u; }
  std::uint64_t initial_state() const;
  std::uint64_t advance(std::uint64_t state) const { return state * kMultiplier + increment(); }
};

/// State after i advances from the initial state, in O(log i).
std::uint64_t jump_to(const PcgStream& s, std::uint64_t i);
std::uint32_t pcg_output(std::uint64_t state);

/// Uniform in (0, 1) with a 53-bit mantissa; i >= 1. Zero maps to 2^-53.
double uniform_at(const PcgStream& s, std::uint64_t i);

double normal_cdf(double x);
/// Inverse standard normal CDF (Wichura's AS241 rational approximations).
double inv_normal_cdf(double u);

/// z_i for i >= 1.
double std_normal(const PcgStream& s, std::uint64_t i);
/// Writes z_first, ..., z_{first+count-1}.
void fill_normals(const PcgStream& s, std::uint64_t first, std::size_t count, double* out);

/// Sequential reader of z_first, z_first+1, ...; one jump at construction.
class NormalCursor {
 public:
  NormalCursor(const PcgStream& s, std::uint64_t first);
  void fill(std::size_t count, double* out);
  std::uint64_t next_index() const { return next_; }

 private:
  PcgStream s_;
  std::uint64_t state_, next_;
};

struct ClipBound {
  double U_SN = 1.0;
};

inline double clip(double z, ClipBound b) { return z > b.U_SN ? b.U_SN : (z < -b.U_SN ? -b.U_SN : z); }

/// Entries z_{(i-1) r w + n w + k}, k = 1..w, for sample i >= 1 and step 0 <= n < r.
Vec noise_vector(const PcgStream& s, std::uint64_t i, int n, int w, int r);

/// U_SN = max{sqrt(2 log(2 r w N_s / (sqrt(2 pi) delta))), 1}.
ClipBound choose_usn(double r, double width, double N_s, double delta);

}  // namespace qsde
