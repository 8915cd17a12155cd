#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "bufprop/harness.hpp"
#include "bufprop/trace.hpp"
#include "bufprop/workloads.hpp"

using namespace bufprop;
using namespace bufprop::harness;

namespace {

Trace mixed_trace(std::uint64_t n, std::uint64_t ops, double mix, std::uint64_t seed) {
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::UniformRandom;
  s.n = n;
  s.op_count = ops;
  s.mix = mix;
  s.seed = seed;
  return workloads::generate(s);
}

}  // namespace

TEST_CASE("run: all-query beps report has zero flush I/O") {
  RunConfig cfg;
  cfg.tree = TreeKind::Beps;
  cfg.fanout = 64;
  cfg.b = 64;
  cfg.n = 1 << 12;
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::QueryStorm;
  s.n = 1 << 12;
  s.op_count = 400;
  s.mix = 1.0;
  RunResult r = run(cfg, workloads::generate(s));
  CHECK(r.semantic_ok);
  CHECK(r.ledger.flush_io == 0);
  CHECK(r.report["ledger"]["flush_io"] == 0);
  CHECK(r.report["config"]["tree"] == "beps");
}

TEST_CASE("run: jello report carries window and phase counts") {
  RunConfig cfg;
  cfg.tree = TreeKind::Jello;
  cfg.b = 256;
  cfg.delta = 0.5;
  cfg.n = 1 << 12;
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::PivotSplit;
  s.n = 1 << 12;
  s.op_count = 3000;
  s.mix = 0.5;
  RunResult r = run(cfg, workloads::generate(s));
  CHECK(r.semantic_ok);
  REQUIRE(r.report["tree"].contains("supernodes"));
  auto& sn = r.report["tree"]["supernodes"][0];
  CHECK(sn["windows"].get<std::uint64_t>() >= 1);
  CHECK(sn.contains("phases"));
  CHECK(sn.contains("terminations"));
  CHECK(sn.contains("converged_micro_fraction"));
}

TEST_CASE("run: reshortcut audit lands in the jello report when requested") {
  RunConfig cfg;
  cfg.tree = TreeKind::Jello;
  cfg.b = 256;
  cfg.delta = 0.5;
  cfg.n = 1 << 12;
  cfg.reshortcut_audit = true;
  RunResult r = run(cfg, mixed_trace(1 << 12, 2000, 0.5, 2));
  CHECK(r.semantic_ok);
  CHECK(r.report["tree"]["supernodes"][0].contains("reshortcut_ratio"));
}

TEST_CASE("run: violated assert thresholds are reported by metric name") {
  RunConfig cfg;
  cfg.tree = TreeKind::Beps;
  cfg.fanout = 8;
  cfg.b = 64;
  cfg.n = 1 << 10;
  cfg.assert_max["total"] = 1.0;  // impossible bound
  cfg.assert_max["rebuild_fraction"] = 1.0;  // satisfied
  RunResult r = run(cfg, mixed_trace(1 << 10, 500, 0.5, 3));
  REQUIRE(r.violated_metrics.size() == 1);
  CHECK(r.violated_metrics[0] == "total");
}

TEST_CASE("run is deterministic: identical configs give identical ledgers") {
  RunConfig cfg;
  cfg.tree = TreeKind::Jello;
  cfg.b = 256;
  cfg.delta = 0.5;
  cfg.n = 1 << 12;
  Trace t = mixed_trace(1 << 12, 2500, 0.4, 7);
  RunResult a = run(cfg, t);
  RunResult b = run(cfg, t);
  CHECK(a.ledger == b.ledger);
  CHECK(a.report["ledger"] == b.report["ledger"]);
}

TEST_CASE("compare: fixed column order, identical configs give identical rows") {
  RunConfig base;
  base.b = 64;
  base.n = 1 << 10;
  RunConfig a = base;
  a.tree = TreeKind::Beps;
  a.fanout = 8;
  RunConfig b = a;
  RunConfig c = base;
  c.tree = TreeKind::Fct;
  Trace t = mixed_trace(1 << 10, 800, 0.5, 5);
  CompareResult res = compare({a, b, c}, t, true);
  REQUIRE(res.rows.size() == 3);
  CHECK(res.rows[0].ledger == res.rows[1].ledger);
  CHECK(res.csv.rfind("tree,fanout,total_io,charged_total,search_io,flush_io,rebuild_io,"
                      "split_io,per_op,ratio_to_best,ratio_to_fixed_oracle,"
                      "ratio_to_static_oracle",
                      0) == 0);
  CHECK(res.best_fixed_oracle_cost > 0.0);
  CHECK(res.static_oracle_cost > 0.0);  // universe 1024 <= default cap
}

TEST_CASE("oracle report: fixed fanout always, static plan when small") {
  RunConfig cfg;
  cfg.b = 64;
  cfg.n = 512;
  Trace t = mixed_trace(512, 600, 0.5, 9);
  auto j = oracle_report(t, cfg, 4096);
  CHECK(j["best_fixed_fanout"]["fanout"].get<std::uint64_t>() >= 2);
  CHECK(!j["optimal_static_tree"].is_null());

  auto j2 = oracle_report(t, cfg, 100);  // cap below the universe
  CHECK(j2["optimal_static_tree"].is_null());
}

TEST_CASE("cache presets: pinning never raises any ledger category") {
  for (TreeKind tree : {TreeKind::Beps, TreeKind::Fct, TreeKind::Jello}) {
    RunConfig uncached;
    uncached.tree = tree;
    uncached.fanout = 16;
    uncached.b = 256;
    uncached.delta = 0.5;
    uncached.n = 1 << 12;
    RunConfig cached = uncached;
    cached.cache_c = 1.0 / 64.0;  // augmented preset: threshold n/(C*B^{3d})
    REQUIRE(cached.cache_threshold() < machine::Cache::NEVER);
    Trace t = mixed_trace(1 << 12, 3000, 0.5, 13);
    RunResult u = run(uncached, t);
    RunResult c = run(cached, t);
    CHECK(u.semantic_ok);
    CHECK(c.semantic_ok);
    CHECK(c.ledger.search_io <= u.ledger.search_io);
    CHECK(c.ledger.total() <= u.ledger.total());
  }
}

TEST_CASE("equal cache preset uses n/C as the threshold") {
  RunConfig cfg;
  cfg.b = 256;
  cfg.n = 1 << 12;
  cfg.cache_c = 4.0;
  cfg.cache_augmented = false;
  CHECK(cfg.cache_threshold() == (1 << 12) / 4);
  cfg.cache_augmented = true;  // divisor gains B^{3d} = 4096
  CHECK(cfg.cache_threshold() == 1);
}

TEST_CASE("ratio rendering uses exact rational arithmetic to 4 decimals") {
  CHECK(cost::ratio4(1, 3) == "0.3333");
  CHECK(cost::ratio4(2, 3) == "0.6667");
  CHECK(cost::ratio4(5, 1) == "5.0000");
  CHECK(cost::ratio4(0, 7) == "0.0000");
  CHECK(cost::ratio4(10, 4) == "2.5000");
}
