// Deterministic, seeded trace generators. Identical spec -> identical trace,
// byte for byte; the RNG is SplitMix64 used counter-style so traces reproduce
// across platforms and languages.
#pragma once

#include <cstdint>
#include <string>

#include "bufprop/types.hpp"

namespace bufprop::workloads {

// SplitMix64 output for counter x (pure function of its argument).
std::uint64_t splitmix64(std::uint64_t x);

enum class Kind {
  UniformRandom,
  Sequential,
  PivotSplit,
  DriftingHotspot,
  InsertStorm,
  QueryStorm,
  PhaseShift,
};

Kind kind_from_string(const std::string& s);
const char* to_string(Kind k);

struct WorkloadSpec {
  Kind kind = Kind::UniformRandom;
  std::uint64_t n = 1 << 12;        // key universe size
  std::uint64_t op_count = 1 << 10;
  std::uint64_t seed = 1;
  double mix = 0.5;                 // query fraction
  double drift_rate = 0.0;          // keys per operation (hotspot kinds only)
};

// Emits the trace for `spec`. Query/write interleaving follows an exact
// accumulator so op_count and mix are honored to within rounding.
Trace generate(const WorkloadSpec& spec);

// The keys a run of `spec` assumes to be present before the trace starts
// (1..n for the fixed-key kinds, empty for InsertStorm).
bool preloads_universe(Kind k);

}  // namespace bufprop::workloads
