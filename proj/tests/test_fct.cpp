#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numeric>

#include "bufprop/fct.hpp"
#include "bufprop/oracle.hpp"
#include "bufprop/workloads.hpp"

using namespace bufprop;
using namespace bufprop::fct;
using machine::Machine;

namespace {

std::vector<Key> keys_1_to(std::uint64_t n) {
  std::vector<Key> v(n);
  std::iota(v.begin(), v.end(), Key(1));
  return v;
}

}  // namespace

TEST_CASE("model_cost closed form") {
  // Single leaf: no internal levels, queries touch one block.
  CHECK(model_cost(4096, 2, 1, 10, 99) == doctest::Approx(10.0));
  // Flat tree (f = lambda): one internal level plus the leaf.
  CHECK(model_cost(4096, 64, 64, 1, 0) == doctest::Approx(2.0));
  // B=4096, 64 leaves, all-write: small fanout wins.
  CHECK(model_cost(4096, 2, 64, 0, 4096) == doctest::Approx(4096.0 * (4.0 / 4096.0) * 6));
  CHECK(model_cost(4096, 64, 64, 0, 4096) == doctest::Approx(4096.0 * (128.0 / 4096.0) * 1));
  CHECK(model_cost(4096, 2, 64, 0, 4096) < model_cost(4096, 64, 64, 0, 4096));
}

TEST_CASE("select_fanout: query-biased argmin with ties toward larger f") {
  Controller ctl(4096);
  ctl.start_epoch(64, 4096);
  // W = 0: the query term is minimized by the largest fanout.
  CHECK(select_fanout(4096, ctl.state()) == 4096);

  // Heavy writes push the selection down to the smallest fanouts.
  FctState st;
  st.leaves_at_epoch_start = 64;
  st.writes = 64 * 4096 * 100;
  std::uint64_t f = select_fanout(4096, st);
  // Independent check: enumerate all candidates.
  std::uint64_t expect = 2;
  cost::Scaled best = cost::model_cost_scaled(4096, 2, 64, 64, st.writes);
  for (std::uint64_t c = 2; c <= 4096; c *= 2) {
    cost::Scaled v = cost::model_cost_scaled(4096, c, 64, 64, st.writes);
    if (v <= best) {
      best = v;
      expect = c;
    }
  }
  CHECK(f == expect);
  CHECK(f <= 4);
}

TEST_CASE("selection sequence is non-increasing over any trace") {
  for (std::uint64_t seed : {7ull, 8ull}) {
    workloads::WorkloadSpec s;
    s.kind = workloads::Kind::UniformRandom;
    s.n = 1 << 12;
    s.op_count = 20000;
    s.mix = 0.05;
    s.seed = seed;
    Controller ctl(256);
    ctl.start_epoch(32, 1 << 12);
    std::uint64_t prev = 256;
    for (const Op& op : workloads::generate(s)) {
      auto d = ctl.after_op(op.kind);  // throws if monotonicity breaks
      if (d.restart) {
        ctl.start_epoch(32, 1 << 12);
        prev = 256;
        continue;
      }
      CHECK(ctl.state().selected_fanout <= prev);
      prev = ctl.state().selected_fanout;
    }
  }
}

TEST_CASE("first operation of an epoch runs at physical fanout B") {
  Machine m(256);
  FctTree t(m);
  t.bulk_load(keys_1_to(1 << 12));
  CHECK(t.state().physical_fanout == 256);
  CHECK(t.tree().fanout() == 256);
  t.execute(Op::query(5));
  CHECK(t.tree().fanout() == 256);  // all-query epoch keeps fanout B
}

TEST_CASE("physical rebuild fires when the target halves, to pow2(sqrt(target))") {
  // B=4096: drive writes until the selection drops to 2048 = B/2; the
  // physical fanout then rebuilds to 2^ceil(log2(sqrt(2048))) = 64.
  Machine m(4096);
  FctTree t(m);
  t.bulk_load(keys_1_to(1 << 15));  // 8 leaves of 4096
  REQUIRE(t.tree().leaf_count() == 8);
  std::uint64_t phys = 4096;
  std::uint64_t i = 0;
  while (t.state().physical_fanout == 4096) {
    t.execute(Op::update(Key(1 + i % (1 << 15)), 1));
    ++i;
    REQUIRE(i < (1u << 22));
    if (t.state().epoch > 1) break;  // restarted before any drop (not expected)
  }
  phys = t.state().physical_fanout;
  CHECK(phys == cost::pow2_sqrt(t.state().selected_fanout));
  CHECK(t.state().selected_fanout * 2 <= 4096);
}

TEST_CASE("pow2_sqrt rounding") {
  CHECK(cost::pow2_sqrt(4096) == 64);
  CHECK(cost::pow2_sqrt(2048) == 64);  // exponent 11 -> ceil(11/2) = 6
  CHECK(cost::pow2_sqrt(64) == 8);
  CHECK(cost::pow2_sqrt(32) == 8);
  CHECK(cost::pow2_sqrt(8) == 4);
  CHECK(cost::pow2_sqrt(4) == 2);
  CHECK(cost::pow2_sqrt(2) == 2);
}

TEST_CASE("shrink rebuild block count: 64 leaves, 64 -> 8") {
  Machine m(64);
  bpt::Tree t(m, 64);
  t.bulk_load(keys_1_to(64 * 64));
  REQUIRE(t.leaf_count() == 64);
  // Counted rebuilt internal nodes: 1 old root; new layer of 8 plus a root.
  CHECK(t.rebuild_internal(8) == 9);
}

TEST_CASE("maybe_restart: boundaries and the return to fanout B") {
  Controller ctl(64);
  ctl.start_epoch(16, 100);
  // Exactly L queries: no restart (strict surpass).
  for (int i = 0; i < 16; ++i) {
    auto d = ctl.after_op(OpKind::Query);
    CHECK(!d.restart);
  }
  // One more query surpasses L.
  CHECK(ctl.after_op(OpKind::Query).restart);

  Controller ctl2(64);
  ctl2.start_epoch(16, 10);
  for (int i = 0; i < 10; ++i) CHECK(!ctl2.after_op(OpKind::Insert).restart);
  CHECK(ctl2.after_op(OpKind::Insert).restart);  // W = N0 + 1
}

TEST_CASE("restart returns the physical tree to fanout B") {
  Machine m(64);
  FctTree t(m);
  t.bulk_load(keys_1_to(1024));  // 16 leaves, L=16, N0=1024
  // Burn through one epoch with queries.
  for (int i = 0; i < 17; ++i) t.execute(Op::query(Key(1 + i)));
  CHECK(t.state().epoch == 2);
  CHECK(t.tree().fanout() == 64);
  CHECK(t.epoch_history().size() == 1);
  CHECK(t.epoch_history()[0].queries == 17);
}

TEST_CASE("rebuild budget per epoch stays within 2L + L/f_final") {
  Machine m(256);
  FctTree t(m);
  t.bulk_load(keys_1_to(1 << 14));  // 64 leaves
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::UniformRandom;
  s.n = 1 << 14;
  s.op_count = 60000;
  s.mix = 0.001;
  s.seed = 4;
  for (const Op& op : workloads::generate(s)) t.execute(op);

  auto check_epoch = [](const EpochStats& e) {
    std::uint64_t bound = 2 * e.leaves + e.leaves / std::max<std::uint64_t>(1, e.final_fanout);
    CHECK(e.rebuild_io <= bound);
  };
  for (const auto& e : t.epoch_history()) check_epoch(e);
  // Current epoch too.
  std::uint64_t L = t.state().leaves_at_epoch_start;
  CHECK(t.state().rebuild_io_this_epoch <=
        2 * L + L / std::max<std::uint64_t>(1, t.state().physical_fanout));
}

TEST_CASE("full convergence cascade keeps total rebuild under the geometric bound") {
  Machine m(1024);
  FctTree t(m);
  t.bulk_load(keys_1_to(1 << 15));  // 32 leaves of 1024
  std::uint64_t L = t.tree().leaf_count();
  // Pure writes, one epoch's worth.
  std::uint64_t n0 = t.state().keys_at_epoch_start;
  for (std::uint64_t i = 0; i < n0; ++i) t.execute(Op::update(Key(1 + i % (1 << 15)), 1));
  CHECK(t.state().epoch == 1);  // W = N0 exactly: no restart yet
  CHECK(m.ledger().rebuild_io <= 2 * L);
}

TEST_CASE("sqrt-tweak safety: physical stays >= sqrt(previous selection)") {
  Machine m(1024);
  FctTree t(m);
  t.bulk_load(keys_1_to(1 << 15));
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::UniformRandom;
  s.n = 1 << 15;
  s.op_count = 40000;
  s.mix = 0.01;
  s.seed = 31;
  for (const Op& op : workloads::generate(s)) t.execute(op);
  // Lag is permitted on at most O(log log B) operations per epoch.
  std::uint64_t epochs = t.state().epoch;
  std::uint64_t loglog = std::uint64_t(std::ceil(std::log2(std::log2(1024.0)))) + 1;
  CHECK(t.state().sqrt_lag_ops <= epochs * loglog);
}

TEST_CASE("converged fanout matches the oracle argmin at matched counts") {
  // A trace with exactly L queries and a write flood: the query-biased
  // selection (which always charges L queries) coincides with the plain
  // best-fixed argmin over the realized counts.
  const int b = 256;
  std::vector<Key> preload = keys_1_to(1 << 13);
  Machine m(b);
  FctTree t(m);
  t.bulk_load(preload);
  std::uint64_t L = t.tree().leaf_count();
  std::uint64_t W = 6000;
  Trace trace;
  for (std::uint64_t i = 0; i < L; ++i) trace.push_back(Op::query(Key(1 + i)));
  for (std::uint64_t i = 0; i < W; ++i)
    trace.push_back(Op::update(Key(1 + i % (1 << 13)), Word(i)));
  for (const Op& op : trace) t.execute(op);
  REQUIRE(t.state().epoch == 1);

  auto profile = oracle::build_profile(preload, trace);
  auto best = oracle::best_fixed_fanout(profile, L, b);
  CHECK(t.state().selected_fanout == best.fanout);
}

TEST_CASE("regret against the best fixed fanout on single-epoch traces") {
  // FCT total <= 8 * best_fixed + 4L over mixed single-epoch traces.
  const int b = 256;
  std::vector<Key> preload = keys_1_to(1 << 13);
  for (std::uint64_t seed : {1ull, 2ull, 5ull}) {
    for (double mix : {0.0, 0.3, 0.9}) {
      workloads::WorkloadSpec s;
      s.kind = workloads::Kind::UniformRandom;
      s.n = 1 << 13;
      s.seed = seed;
      s.mix = mix;
      // Single epoch: at most L queries and N0 writes.
      std::uint64_t L = (1 << 13) / b;  // 32 leaves
      s.op_count = std::min<std::uint64_t>(
          std::uint64_t(mix > 0 ? double(L) / mix : 1e18), std::uint64_t(8000));
      Trace trace = workloads::generate(s);

      auto res = fct_tree_run(trace, b, preload);
      CHECK(res.final_state.epoch == 1);

      auto profile = oracle::build_profile(preload, trace);
      auto best = oracle::best_fixed_fanout(profile, L, b);
      double bound = 8.0 * best.cost + 4.0 * double(L);
      CHECK(double(res.ledger.total()) <= bound);
    }
  }
}
