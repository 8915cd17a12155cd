// Offline baselines and ground truth: closed-form best fixed fanout, the
// interval-DP optimal static buffered-propagation tree, small brute forces
// that validate both, and the flat-map semantic oracle.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "bufprop/cost_model.hpp"
#include "bufprop/machine.hpp"
#include "bufprop/types.hpp"

namespace bufprop::oracle {

// Per-key query/write counts over the final key universe.
struct OpProfile {
  std::vector<Key> universe;       // sorted, distinct
  std::vector<std::uint64_t> q;    // queries per universe position
  std::vector<std::uint64_t> w;    // inserts+updates per universe position
  std::uint64_t total_q = 0;
  std::uint64_t total_w = 0;
};

// Aggregates a trace (plus preloaded keys) into a profile. Queries to absent
// keys are attributed to the covering leaf's successor key.
OpProfile build_profile(const std::vector<Key>& preload, const Trace& trace);

struct FixedFanoutChoice {
  std::uint64_t fanout = 2;
  cost::Scaled cost_scaled = 0;  // cost * B
  double cost = 0.0;
};

// Exact minimum of the closed cost form over power-of-two f in [2, B];
// ties break toward the larger fanout.
FixedFanoutChoice best_fixed_fanout(const OpProfile& p, std::uint64_t lambda, std::uint64_t b);

// An oracle-produced static tree: explicit pivots and per-node fanout, with
// its exact cost under the shared cost constants.
struct StaticPlan {
  KeyRange range;
  std::uint64_t size = 0;             // keys in range
  std::uint64_t fanout = 0;           // 0 for a leaf
  std::vector<Key> pivots;
  std::vector<StaticPlan> children;
  double node_cost = 0.0;             // this node's own term
  double total_cost = 0.0;            // subtree total
  cost::Scaled total_cost_scaled = 0;

  bool is_leaf() const { return fanout == 0; }
};

// Interval dynamic program over key ranges: node size classes are powers of
// two times B/2, children sizes lie in [s/f, 4s/f), per-node cost is
// R_interval + W_interval * 2f/B (leaves carry only their query term). Exact
// within this discretized class; rejects universes above max_keys.
StaticPlan optimal_static_tree(const OpProfile& p, std::uint64_t b, std::size_t max_keys = 4096);

// Full enumeration over every valid static tree in the same class; the
// independent check for the DP on small universes.
cost::Scaled static_tree_bruteforce_cost(const OpProfile& p, std::uint64_t b,
                                         std::size_t max_keys = 64);

struct EqualFanoutResult {
  std::vector<std::uint64_t> fanouts;
  cost::Scaled cost_scaled = 0;
  bool minimizer_is_most_equal = false;  // all f_i within one power-of-two step
};

// Exhaustively enumerates power-of-two fanout vectors (f_1..f_d) with product
// leaf_budget under cost sum_i [R + W*2f_i/B]; asserts the minimizer is the
// most-equal vector.
EqualFanoutResult equal_fanout_bruteforce(int levels, std::uint64_t leaf_budget, std::uint64_t r,
                                          std::uint64_t w, std::uint64_t b);

// Flat associative map applying the trace in order; emits each query's
// correct answer (in trace order).
std::vector<std::optional<Word>> semantic_oracle(const std::vector<Key>& preload,
                                                 const Trace& trace);

// Replays a trace on a physically simulated StaticPlan tree; used for the
// oracle/simulator commensurability check and by the harness.
machine::CostLedger simulate_static_plan(const StaticPlan& plan, const std::vector<Key>& preload,
                                         const Trace& trace, int block_size_b,
                                         std::uint64_t cache_threshold = machine::Cache::NEVER);

}  // namespace bufprop::oracle
