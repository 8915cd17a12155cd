// Fanout-convergent tree: a uniform-fanout buffered tree whose fanout starts
// at B and only decreases, driven by a query-biased argmin over the closed
// cost form, with restart epochs and internal-only rebuilds.
#pragma once

#include <cstdint>
#include <vector>

#include "bufprop/bpt.hpp"
#include "bufprop/cost_model.hpp"
#include "bufprop/machine.hpp"
#include "bufprop/types.hpp"

namespace bufprop::fct {

// Closed-form cost of R queries and W writes on a fanout-f tree with `lambda`
// leaves (see cost_model.hpp for the exact scaled form).
inline double model_cost(std::uint64_t b, std::uint64_t f, std::uint64_t lambda, std::uint64_t r,
                         std::uint64_t w) {
  return cost::model_cost(b, f, lambda, r, w);
}

struct FctState {
  std::uint64_t leaves_at_epoch_start = 1;  // L
  std::uint64_t keys_at_epoch_start = 1;    // N0
  std::uint64_t queries = 0;                // R_i
  std::uint64_t writes = 0;                 // W_i
  std::uint64_t selected_fanout = 2;        // monotone non-increasing per epoch
  std::uint64_t physical_fanout = 2;
  std::uint64_t epoch = 0;
  std::uint64_t rebuild_io_this_epoch = 0;
  std::uint64_t sqrt_lag_ops = 0;  // ops where physical < sqrt(previous selection)
};

struct EpochStats {
  std::uint64_t epoch = 0;
  std::uint64_t leaves = 0;
  std::uint64_t keys = 0;
  std::uint64_t queries = 0;
  std::uint64_t writes = 0;
  std::uint64_t final_fanout = 0;
  std::uint64_t rebuild_io = 0;
};

// Query-biased selection: the optimal fanout for L queries and W_i writes,
// treating the query count as the full leaf count L. Ties break larger.
inline std::uint64_t select_fanout(std::uint64_t b, const FctState& st) {
  return cost::best_fanout(b, st.leaves_at_epoch_start, st.leaves_at_epoch_start, st.writes)
      .fanout;
}

// Fanout schedule shared by the standalone tree and the jello segment trees.
// The owner executes ops and physical rebuilds; the controller says when.
class Controller {
 public:
  explicit Controller(std::uint64_t b) : b_(b) {}

  void start_epoch(std::uint64_t leaves, std::uint64_t keys) {
    st_.leaves_at_epoch_start = std::max<std::uint64_t>(1, leaves);
    st_.keys_at_epoch_start = std::max<std::uint64_t>(1, keys);
    st_.queries = st_.writes = 0;
    st_.selected_fanout = b_;
    st_.physical_fanout = b_;
    st_.epoch++;
    st_.rebuild_io_this_epoch = 0;
  }

  struct Decision {
    std::uint64_t rebuild_to = 0;  // 0: keep current physical fanout
    bool restart = false;
  };

  // Count an executed op and decide on rebuild/restart. The selection is
  // recomputed each op; a physical rebuild fires only when the target drops
  // to half the physical fanout or below, and then rebuilds to the rounded
  // square root of the selection.
  Decision after_op(OpKind kind);

  // Owner reports what it did.
  void note_rebuilt(std::uint64_t new_physical, std::uint64_t charged) {
    st_.physical_fanout = new_physical;
    st_.rebuild_io_this_epoch += charged;
  }

  const FctState& state() const { return st_; }
  FctState& state() { return st_; }

 private:
  std::uint64_t b_;
  FctState st_;
};

// The standalone fanout-convergent tree over key/value leaves.
class FctTree {
 public:
  FctTree(machine::Machine& m, bpt::CostPolicy policy = {});

  void bulk_load(const std::vector<Key>& sorted_keys);
  void execute(const Op& op, std::optional<Word>* answer = nullptr);

  const FctState& state() const { return ctl_.state(); }
  const std::vector<EpochStats>& epoch_history() const { return history_; }
  bpt::Tree& tree() { return tree_; }
  std::uint64_t selections_non_increasing_violations() const { return mono_violations_; }

 private:
  void finish_epoch(std::uint64_t converged_fanout);

  machine::Machine* m_;
  bpt::Tree tree_;
  Controller ctl_;
  std::vector<EpochStats> history_;
  std::uint64_t mono_violations_ = 0;
};

struct FctRunResult {
  machine::CostLedger ledger;
  std::vector<EpochStats> epochs;
  FctState final_state;
};

FctRunResult fct_tree_run(const Trace& trace, int block_size_b, const std::vector<Key>& preload,
                          std::uint64_t cache_threshold = machine::Cache::NEVER,
                          double speed_limit_k = 1.0);

}  // namespace bufprop::fct
