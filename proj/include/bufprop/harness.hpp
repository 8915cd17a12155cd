// Experiment harness: run any tree on any trace with every query answer
// cross-checked against the flat-map oracle, emit JSON reports and CSV
// comparisons, and enforce metric thresholds.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "bufprop/jello.hpp"
#include "bufprop/machine.hpp"
#include "bufprop/oracle.hpp"
#include "bufprop/types.hpp"

#include "json.hpp"

namespace bufprop::harness {

enum class TreeKind { Beps, Fct, FixedPivot, Jello };

TreeKind tree_kind_from_string(const std::string& s);
const char* to_string(TreeKind k);

struct RunConfig {
  TreeKind tree = TreeKind::Beps;
  std::uint64_t fanout = 0;  // beps only; 0 means f = B
  int b = 4096;
  double delta = 0.5;
  std::uint64_t n = 1 << 16;  // preloaded key universe 1..n
  bool preload = true;
  double cache_c = 0.0;       // 0 disables caching
  bool cache_augmented = true;
  double speed_limit_k = 1.0;
  std::uint64_t seed = 0;  // echoed for reproducibility
  int c_phase = 4;
  double rho = 0.125;
  bool charge_splits = true;     // jello / fixed-pivot side
  bool reshortcut_audit = false;
  std::map<std::string, double> assert_max;  // metric name -> bound

  std::uint64_t cache_threshold() const;
  jello::Config jello_config() const;
  nlohmann::json to_json() const;
};

struct RunResult {
  machine::CostLedger ledger;
  nlohmann::json report;
  bool semantic_ok = true;
  std::uint64_t checked_queries = 0;
  std::uint64_t first_divergence = 0;  // op index, valid when !semantic_ok
  std::vector<std::string> violated_metrics;
};

RunResult run(const RunConfig& cfg, const Trace& trace);

nlohmann::json ledger_json(const machine::CostLedger& l);

// Side-by-side comparison of several configurations on one trace. Column
// order is fixed: tree, fanout, total_io, charged_total, search_io, flush_io,
// rebuild_io, split_io, per_op, ratio_to_best, ratio_to_fixed_oracle,
// ratio_to_static_oracle. Ratios are exact rationals rendered to 4 decimals.
struct CompareRow {
  std::string label;
  machine::CostLedger ledger;
  double per_op = 0.0;
};

struct CompareResult {
  std::vector<CompareRow> rows;
  double best_fixed_oracle_cost = 0.0;
  double static_oracle_cost = -1.0;  // <0: universe too large, not computed
  std::string csv;
};

CompareResult compare(const std::vector<RunConfig>& cfgs, const Trace& trace,
                      bool with_oracles, std::size_t static_oracle_max_keys = 2048);

// Oracle artifacts for a trace: best fixed fanout and (when the universe is
// small enough) the optimal static plan, serialized as nested JSON.
nlohmann::json oracle_report(const Trace& trace, const RunConfig& cfg,
                             std::size_t max_keys = 4096);

nlohmann::json static_plan_json(const oracle::StaticPlan& plan);

}  // namespace bufprop::harness
