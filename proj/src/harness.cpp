#include "bufprop/harness.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "bufprop/bpt.hpp"
#include "bufprop/check.hpp"
#include "bufprop/fct.hpp"

namespace bufprop::harness {

using nlohmann::json;

TreeKind tree_kind_from_string(const std::string& s) {
  if (s == "beps") return TreeKind::Beps;
  if (s == "fct") return TreeKind::Fct;
  if (s == "fixed_pivot") return TreeKind::FixedPivot;
  if (s == "jello") return TreeKind::Jello;
  throw std::invalid_argument("unknown tree kind: " + s);
}

const char* to_string(TreeKind k) {
  switch (k) {
    case TreeKind::Beps: return "beps";
    case TreeKind::Fct: return "fct";
    case TreeKind::FixedPivot: return "fixed_pivot";
    case TreeKind::Jello: return "jello";
  }
  return "?";
}

std::uint64_t RunConfig::cache_threshold() const {
  jello::Config jc = jello_config();
  return jc.cache_threshold(std::max<std::uint64_t>(1, n));
}

jello::Config RunConfig::jello_config() const {
  jello::Config jc;
  jc.b = b;
  jc.delta = delta;
  jc.cache_c = cache_c;
  jc.cache_augmented = cache_augmented;
  jc.speed_limit_k = speed_limit_k;
  jc.rho_upper = rho;
  jc.c_phase = c_phase;
  jc.charge_splits = charge_splits;
  return jc;
}

json RunConfig::to_json() const {
  json j;
  j["tree"] = to_string(tree);
  if (tree == TreeKind::Beps) j["fanout"] = fanout ? fanout : std::uint64_t(b);
  j["B"] = b;
  j["delta"] = delta;
  j["N"] = n;
  j["preload"] = preload;
  j["C"] = cache_c;
  j["cache_preset"] = cache_augmented ? "augmented" : "equal";
  j["cache_threshold_keys"] =
      cache_threshold() == machine::Cache::NEVER ? json(nullptr) : json(cache_threshold());
  j["K"] = speed_limit_k;
  j["seed"] = seed;
  j["c_phase"] = c_phase;
  j["rho"] = rho;
  j["charge_splits"] = charge_splits;
  j["version"] = "bufprop 0.1.0";
  return j;
}

json ledger_json(const machine::CostLedger& l) {
  json j;
  j["search_io"] = l.search_io;
  j["flush_io"] = l.flush_io;
  j["rebuild_io"] = l.rebuild_io;
  j["split_io"] = l.split_io;
  j["total"] = l.total();
  j["charged_total"] = l.charged_total();
  j["rebuild_fraction"] = l.rebuild_fraction();
  return j;
}

namespace {

std::vector<Key> preload_keys(const RunConfig& cfg) {
  if (!cfg.preload || cfg.n == 0) return {};
  std::vector<Key> keys(cfg.n);
  std::iota(keys.begin(), keys.end(), Key(1));
  return keys;
}

double metric_value(const std::string& name, const machine::CostLedger& l,
                    std::uint64_t op_count) {
  if (name == "total") return double(l.total());
  if (name == "charged_total") return l.charged_total();
  if (name == "search_io") return double(l.search_io);
  if (name == "flush_io") return double(l.flush_io);
  if (name == "rebuild_io") return double(l.rebuild_io);
  if (name == "split_io") return double(l.split_io);
  if (name == "rebuild_fraction") return l.rebuild_fraction();
  if (name == "per_op") return op_count ? double(l.total()) / double(op_count) : 0.0;
  throw std::invalid_argument("unknown metric: " + name);
}

struct SemanticCheck {
  std::vector<std::optional<Word>> expected;
  std::size_t qi = 0;
  bool ok = true;
  std::uint64_t first_divergence = 0;

  void observe(std::size_t op_index, const std::optional<Word>& got) {
    if (!ok) {
      ++qi;
      return;
    }
    if (got != expected[qi]) {
      ok = false;
      first_divergence = op_index;
    }
    ++qi;
  }
};

}  // namespace

RunResult run(const RunConfig& cfg, const Trace& trace) {
  RunResult res;
  std::vector<Key> preload = preload_keys(cfg);
  SemanticCheck sem;
  sem.expected = oracle::semantic_oracle(preload, trace);

  json tree_section;
  machine::CostLedger ledger;

  switch (cfg.tree) {
    case TreeKind::Beps: {
      machine::Machine m(cfg.b, cfg.cache_threshold());
      m.ledger().speed_limit_k = cfg.speed_limit_k;
      bpt::Tree t(m, cfg.fanout ? cfg.fanout : std::uint64_t(cfg.b));
      t.bulk_load(preload);
      for (std::size_t i = 0; i < trace.size(); ++i) {
        std::optional<Word> got;
        t.execute(trace[i], &got);
        if (trace[i].kind == OpKind::Query) sem.observe(i, got);
      }
      ledger = m.ledger();
      tree_section["height"] = t.height();
      tree_section["leaves"] = t.leaf_count();
      tree_section["keys"] = t.key_count();
      break;
    }
    case TreeKind::Fct: {
      machine::Machine m(cfg.b, cfg.cache_threshold());
      m.ledger().speed_limit_k = cfg.speed_limit_k;
      fct::FctTree t(m);
      t.bulk_load(preload);
      for (std::size_t i = 0; i < trace.size(); ++i) {
        std::optional<Word> got;
        t.execute(trace[i], &got);
        if (trace[i].kind == OpKind::Query) sem.observe(i, got);
      }
      ledger = m.ledger();
      json epochs = json::array();
      for (const auto& e : t.epoch_history()) {
        epochs.push_back({{"epoch", e.epoch},
                          {"leaves", e.leaves},
                          {"keys", e.keys},
                          {"queries", e.queries},
                          {"writes", e.writes},
                          {"final_fanout", e.final_fanout},
                          {"rebuild_io", e.rebuild_io}});
      }
      tree_section["epochs"] = epochs;
      tree_section["current_epoch"] = t.state().epoch;
      tree_section["selected_fanout"] = t.state().selected_fanout;
      tree_section["physical_fanout"] = t.state().physical_fanout;
      break;
    }
    case TreeKind::FixedPivot: {
      machine::Machine m(cfg.b, cfg.cache_threshold());
      m.ledger().speed_limit_k = cfg.speed_limit_k;
      jello::FixedPivotTree t(m, cfg.jello_config(), preload);
      for (std::size_t i = 0; i < trace.size(); ++i) {
        std::optional<Word> got;
        t.execute(trace[i], &got);
        if (trace[i].kind == OpKind::Query) sem.observe(i, got);
      }
      ledger = m.ledger();
      auto rep = t.report();
      tree_section["forced_restarts"] = rep.forced_restarts;
      tree_section["supernode_levels"] = rep.supernode_levels;
      tree_section["final_fanouts"] = rep.final_fanouts;
      break;
    }
    case TreeKind::Jello: {
      machine::Machine m(cfg.b, cfg.cache_threshold());
      m.ledger().speed_limit_k = cfg.speed_limit_k;
      jello::JelloTree t(m, cfg.jello_config(), std::max<std::uint64_t>(2, cfg.n));
      t.bulk_load(preload);
      for (std::size_t i = 0; i < trace.size(); ++i) {
        std::optional<Word> got;
        t.execute(trace[i], &got);
        if (trace[i].kind == OpKind::Query) sem.observe(i, got);
      }
      ledger = m.ledger();
      auto rep = t.report(cfg.reshortcut_audit);
      json sns = json::array();
      for (const auto& s : rep.supernodes) {
        json sj = {{"height", s.height},
                   {"size_keys", s.size_keys},
                   {"windows", s.windows},
                   {"phases", s.phases},
                   {"terminations", s.crossings},
                   {"converged_windows", s.converged_windows},
                   {"split_terminations", s.split_terminations},
                   {"io_clock", s.io_clock},
                   {"rebuild_io", s.rebuild_io},
                   {"rebuild_fraction", s.rebuild_fraction},
                   {"converged_micro_fraction", s.converged_micro_fraction},
                   {"never_converged_io_fraction", s.never_converged_io_fraction}};
        if (cfg.reshortcut_audit) sj["reshortcut_ratio"] = s.reshortcut_ratio;
        sns.push_back(sj);
      }
      tree_section["supernodes"] = sns;
      tree_section["leaf_splits"] = rep.leaf_splits;
      tree_section["supernode_splits"] = rep.supernode_splits;
      tree_section["additive_term"] = rep.additive_term;
      const auto& a = t.audits();
      tree_section["audits"] = {{"installs", a.installs},
                                {"install_age_resets_bad", a.install_age_resets_bad},
                                {"halving_violations", a.halving_violations},
                                {"anchor_retention_violations", a.anchor_retention_violations},
                                {"phase_bound_violations", a.phase_bound_violations},
                                {"window_geometry_violations", a.window_geometry_violations},
                                {"shortcut_query_over_2", a.shortcut_query_over_2},
                                {"max_install_rebuild_io", a.max_install_rebuild_io}};
      break;
    }
  }

  res.ledger = ledger;
  res.semantic_ok = sem.ok;
  res.checked_queries = sem.qi;
  res.first_divergence = sem.first_divergence;

  res.report["config"] = cfg.to_json();
  res.report["ops"] = trace.size();
  res.report["ledger"] = ledger_json(ledger);
  res.report["tree"] = tree_section;
  res.report["semantic"] = {{"checked_queries", sem.qi}, {"ok", sem.ok}};
  if (!sem.ok) res.report["semantic"]["first_divergent_op"] = sem.first_divergence;

  for (const auto& [metric, bound] : cfg.assert_max) {
    double v = metric_value(metric, ledger, trace.size());
    if (v > bound) res.violated_metrics.push_back(metric);
  }
  if (!res.violated_metrics.empty()) res.report["violated"] = res.violated_metrics;
  return res;
}

CompareResult compare(const std::vector<RunConfig>& cfgs, const Trace& trace, bool with_oracles,
                      std::size_t static_oracle_max_keys) {
  check(cfgs.size() >= 2, "compare needs at least two configurations");
  for (const RunConfig& c : cfgs)
    check(c.n == cfgs.front().n && c.preload == cfgs.front().preload,
          "compare requires identical traces and preloads");

  CompareResult res;
  for (const RunConfig& c : cfgs) {
    RunResult r = run(c, trace);
    std::string label = to_string(c.tree);
    if (c.tree == TreeKind::Beps)
      label += "(f=" + std::to_string(c.fanout ? c.fanout : std::uint64_t(c.b)) + ")";
    res.rows.push_back(
        {label, r.ledger, trace.empty() ? 0.0 : double(r.ledger.total()) / double(trace.size())});
  }

  std::uint64_t best_total = UINT64_MAX;
  for (const CompareRow& r : res.rows) best_total = std::min(best_total, r.ledger.total());

  std::uint64_t fixed_scaled_den = std::uint64_t(cfgs.front().b);
  std::uint64_t fixed_scaled_num = 0;
  if (with_oracles) {
    std::vector<Key> preload = preload_keys(cfgs.front());
    oracle::OpProfile prof = oracle::build_profile(preload, trace);
    std::uint64_t lambda =
        std::max<std::uint64_t>(1, prof.universe.size() / std::uint64_t(cfgs.front().b));
    auto best = oracle::best_fixed_fanout(prof, lambda, std::uint64_t(cfgs.front().b));
    res.best_fixed_oracle_cost = best.cost;
    fixed_scaled_num = std::uint64_t(best.cost_scaled);
    if (prof.universe.size() <= static_oracle_max_keys) {
      auto plan = oracle::optimal_static_tree(prof, std::uint64_t(cfgs.front().b),
                                              static_oracle_max_keys);
      res.static_oracle_cost = plan.total_cost;
    }
  }

  std::ostringstream csv;
  csv << "tree,fanout,total_io,charged_total,search_io,flush_io,rebuild_io,split_io,per_op,"
         "ratio_to_best,ratio_to_fixed_oracle,ratio_to_static_oracle\n";
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    const CompareRow& r = res.rows[i];
    const RunConfig& c = cfgs[i];
    csv << to_string(c.tree) << ",";
    if (c.tree == TreeKind::Beps) csv << (c.fanout ? c.fanout : std::uint64_t(c.b));
    csv << "," << r.ledger.total() << "," << r.ledger.charged_total() << ","
        << r.ledger.search_io << "," << r.ledger.flush_io << "," << r.ledger.rebuild_io << ","
        << r.ledger.split_io << ","
        << cost::ratio4(r.ledger.total(), std::max<std::uint64_t>(1, trace.size())) << ","
        << cost::ratio4(r.ledger.total(), std::max<std::uint64_t>(1, best_total));
    if (with_oracles && fixed_scaled_num > 0) {
      // total / (scaled/B) = total*B / scaled, exact.
      csv << "," << cost::ratio4(r.ledger.total() * fixed_scaled_den, fixed_scaled_num);
    } else {
      csv << ",";
    }
    if (with_oracles && res.static_oracle_cost > 0.0) {
      std::uint64_t sc =
          std::uint64_t(std::llround(res.static_oracle_cost * double(fixed_scaled_den)));
      csv << ","
          << cost::ratio4(r.ledger.total() * fixed_scaled_den, std::max<std::uint64_t>(1, sc));
    } else {
      csv << ",";
    }
    csv << "\n";
  }
  res.csv = csv.str();
  return res;
}

json static_plan_json(const oracle::StaticPlan& plan) {
  json j;
  j["size"] = plan.size;
  j["fanout"] = plan.fanout;
  j["node_cost"] = plan.node_cost;
  j["total_cost"] = plan.total_cost;
  if (!plan.pivots.empty()) j["pivots"] = plan.pivots;
  if (!plan.children.empty()) {
    json kids = json::array();
    for (const auto& c : plan.children) kids.push_back(static_plan_json(c));
    j["children"] = kids;
  }
  return j;
}

json oracle_report(const Trace& trace, const RunConfig& cfg, std::size_t max_keys) {
  std::vector<Key> preload = preload_keys(cfg);
  oracle::OpProfile prof = oracle::build_profile(preload, trace);
  std::uint64_t lambda =
      std::max<std::uint64_t>(1, prof.universe.size() / std::uint64_t(cfg.b));
  auto best = oracle::best_fixed_fanout(prof, lambda, std::uint64_t(cfg.b));
  json j;
  j["universe_keys"] = prof.universe.size();
  j["queries"] = prof.total_q;
  j["writes"] = prof.total_w;
  j["best_fixed_fanout"] = {{"fanout", best.fanout}, {"cost", best.cost}};
  if (prof.universe.size() <= max_keys) {
    auto plan = oracle::optimal_static_tree(prof, std::uint64_t(cfg.b), max_keys);
    j["optimal_static_tree"] = static_plan_json(plan);
    j["static_tree_class"] = "size classes (B/2)*2^j, child windows [s/f, 4s/f)";
  } else {
    j["optimal_static_tree"] = nullptr;
    j["static_tree_skipped"] = "universe exceeds max_keys";
  }
  return j;
}

}  // namespace bufprop::harness
