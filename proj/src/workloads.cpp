#include "bufprop/workloads.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace bufprop::workloads {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

namespace {

std::uint64_t rnd(std::uint64_t seed, std::uint64_t counter) {
  return splitmix64(seed * 0x9E3779B97F4A7C15ULL + counter);
}

// Exact interleave: op i is a query iff the running query quota increases.
// For mix=0.5 this yields q,u,q,u,...
bool is_query_step(double mix, std::uint64_t i) {
  auto quota = [mix](std::uint64_t n) { return std::uint64_t(std::ceil(mix * double(n))); };
  return quota(i + 1) > quota(i);
}

Key uniform_key(std::uint64_t n, std::uint64_t seed, std::uint64_t counter) {
  return Key(1 + rnd(seed, counter) % n);
}

void validate(const WorkloadSpec& s) {
  if (s.n < 1) throw std::invalid_argument("workload: n must be >= 1");
  if (s.mix < 0.0 || s.mix > 1.0) throw std::invalid_argument("workload: mix must be in [0,1]");
  if (s.drift_rate < 0.0) throw std::invalid_argument("workload: drift_rate must be >= 0");
  if (s.kind == Kind::InsertStorm) {
    if (s.mix != 0.0) throw std::invalid_argument("insert_storm: mix must be 0");
    if (s.op_count > s.n)
      throw std::invalid_argument("insert_storm: op_count must be <= n (keys are distinct)");
  }
  if (s.kind == Kind::QueryStorm && s.mix != 1.0)
    throw std::invalid_argument("query_storm: mix must be 1");
}

}  // namespace

Kind kind_from_string(const std::string& s) {
  if (s == "uniform_random") return Kind::UniformRandom;
  if (s == "sequential") return Kind::Sequential;
  if (s == "pivot_split") return Kind::PivotSplit;
  if (s == "drifting_hotspot") return Kind::DriftingHotspot;
  if (s == "insert_storm") return Kind::InsertStorm;
  if (s == "query_storm") return Kind::QueryStorm;
  if (s == "phase_shift") return Kind::PhaseShift;
  throw std::invalid_argument("unknown workload kind: " + s);
}

const char* to_string(Kind k) {
  switch (k) {
    case Kind::UniformRandom: return "uniform_random";
    case Kind::Sequential: return "sequential";
    case Kind::PivotSplit: return "pivot_split";
    case Kind::DriftingHotspot: return "drifting_hotspot";
    case Kind::InsertStorm: return "insert_storm";
    case Kind::QueryStorm: return "query_storm";
    case Kind::PhaseShift: return "phase_shift";
  }
  return "?";
}

bool preloads_universe(Kind k) { return k != Kind::InsertStorm; }

Trace generate(const WorkloadSpec& spec) {
  validate(spec);
  Trace t;
  t.reserve(spec.op_count);
  const std::uint64_t n = spec.n;

  switch (spec.kind) {
    case Kind::UniformRandom: {
      for (std::uint64_t i = 0; i < spec.op_count; ++i) {
        Key k = uniform_key(n, spec.seed, i);
        if (is_query_step(spec.mix, i))
          t.push_back(Op::query(k));
        else
          t.push_back(Op::update(k, Word(i + 1)));
      }
      break;
    }
    case Kind::Sequential: {
      // 1, 2, ..., n accessed round robin.
      for (std::uint64_t i = 0; i < spec.op_count; ++i) {
        Key k = Key(1 + i % n);
        if (is_query_step(spec.mix, i))
          t.push_back(Op::query(k));
        else
          t.push_back(Op::update(k, Word(i + 1)));
      }
      break;
    }
    case Kind::PivotSplit: {
      // Queries for k1, updates for its successor k2. k1 sits mid-universe.
      Key k1 = Key(std::max<std::uint64_t>(1, n / 2));
      Key k2 = k1 + 1 <= Key(n) ? k1 + 1 : k1;
      for (std::uint64_t i = 0; i < spec.op_count; ++i) {
        if (is_query_step(spec.mix, i))
          t.push_back(Op::query(k1));
        else
          t.push_back(Op::update(k2, Word(i + 1)));
      }
      break;
    }
    case Kind::DriftingHotspot: {
      // The query/write boundary starts at n/4 and moves right drift_rate
      // keys per operation; queries land on it, writes just right of it.
      double b0 = double(n) / 4.0;
      for (std::uint64_t i = 0; i < spec.op_count; ++i) {
        std::uint64_t b = std::uint64_t(b0 + spec.drift_rate * double(i));
        Key qk = Key(std::min<std::uint64_t>(std::max<std::uint64_t>(b, 1), n));
        Key wk = Key(std::min<std::uint64_t>(std::max<std::uint64_t>(b + 1, 1), n));
        if (is_query_step(spec.mix, i))
          t.push_back(Op::query(qk));
        else
          t.push_back(Op::update(wk, Word(i + 1)));
      }
      break;
    }
    case Kind::InsertStorm: {
      // Distinct fresh keys in seeded shuffle order.
      std::vector<Key> keys(n);
      std::iota(keys.begin(), keys.end(), Key(1));
      for (std::uint64_t i = n - 1; i > 0; --i) {
        std::uint64_t j = rnd(spec.seed, i) % (i + 1);
        std::swap(keys[i], keys[j]);
      }
      for (std::uint64_t i = 0; i < spec.op_count; ++i)
        t.push_back(Op::insert(keys[i], Word(i + 1)));
      break;
    }
    case Kind::QueryStorm: {
      for (std::uint64_t i = 0; i < spec.op_count; ++i)
        t.push_back(Op::query(uniform_key(n, spec.seed, i)));
      break;
    }
    case Kind::PhaseShift: {
      // mix for the first half, 1-mix after the midpoint.
      std::uint64_t half = spec.op_count / 2;
      for (std::uint64_t i = 0; i < spec.op_count; ++i) {
        double m = i < half ? spec.mix : 1.0 - spec.mix;
        std::uint64_t phase_i = i < half ? i : i - half;
        Key k = uniform_key(n, spec.seed, i);
        if (is_query_step(m, phase_i))
          t.push_back(Op::query(k));
        else
          t.push_back(Op::update(k, Word(i + 1)));
      }
      break;
    }
  }
  return t;
}

}  // namespace bufprop::workloads
