// Closed-form I/O cost of running R queries and W writes on a uniform
// fanout-f buffered tree with lambda leaves, in exact arithmetic.
//
// Costs are held scaled by B so they stay integers:
//   scaled(f) = B*R*(h+1) + 2*W*f*h   with h = ceil(log_f lambda),
// i.e. cost = R*(h+1) + W*(2f/B)*h. Queries touch h+1 nodes; each write rides
// h batch hops of size B/f at 2 I/Os per hop. The constants match the
// simulator exactly so oracle and simulation are commensurable.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bufprop::cost {

using Scaled = std::int64_t;  // cost * B

// Smallest h >= 0 with f^h >= lambda.
inline int ceil_log(std::uint64_t f, std::uint64_t lambda) {
  int h = 0;
  std::uint64_t reach = 1;
  while (reach < lambda) {
    reach *= f;
    ++h;
  }
  return h;
}

inline bool is_pow2(std::uint64_t x) { return x > 0 && (x & (x - 1)) == 0; }

inline int log2_exact(std::uint64_t x) {
  int e = 0;
  while ((1ULL << e) < x) ++e;
  return e;
}

// Power-of-two fanout candidates 2..B.
inline std::vector<std::uint64_t> fanout_candidates(std::uint64_t b) {
  std::vector<std::uint64_t> fs;
  for (std::uint64_t f = 2; f <= b; f *= 2) fs.push_back(f);
  return fs;
}

inline Scaled model_cost_scaled(std::uint64_t b, std::uint64_t f, std::uint64_t lambda,
                                std::uint64_t r, std::uint64_t w) {
  int h = ceil_log(f, lambda);
  return Scaled(b) * Scaled(r) * (h + 1) + 2 * Scaled(w) * Scaled(f) * h;
}

inline double model_cost(std::uint64_t b, std::uint64_t f, std::uint64_t lambda, std::uint64_t r,
                         std::uint64_t w) {
  return double(model_cost_scaled(b, f, lambda, r, w)) / double(b);
}

struct FanoutChoice {
  std::uint64_t fanout = 2;
  Scaled cost_scaled = 0;
};

// Exact argmin of model_cost over power-of-two f in [2, B]; ties break toward
// the larger (query-biased) fanout.
inline FanoutChoice best_fanout(std::uint64_t b, std::uint64_t lambda, std::uint64_t r,
                                std::uint64_t w) {
  FanoutChoice best;
  bool first = true;
  for (std::uint64_t f = 2; f <= b; f *= 2) {
    Scaled c = model_cost_scaled(b, f, lambda, r, w);
    if (first || c <= best.cost_scaled) {  // <= : ties go to larger f
      best = {f, c};
      first = false;
    }
  }
  return best;
}

// Round sqrt(f) to a power of two, rounding the exponent up: 2^ceil(log2(f)/2).
inline std::uint64_t pow2_sqrt(std::uint64_t f) {
  int e = log2_exact(f);
  std::uint64_t g = 1ULL << ((e + 1) / 2);
  return g < 2 ? 2 : g;
}

// Exact ratio rendered to 4 decimals (round half up), without going through
// binary floating point.
inline std::string ratio4(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return "inf";
  unsigned __int128 scaled = (unsigned __int128)num * 10000 + den / 2;
  unsigned __int128 q = scaled / den;
  std::uint64_t whole = std::uint64_t(q / 10000);
  std::uint64_t frac = std::uint64_t(q % 10000);
  std::string fs = std::to_string(frac);
  fs.insert(0, 4 - fs.size(), '0');
  return std::to_string(whole) + "." + fs;
}

}  // namespace bufprop::cost
