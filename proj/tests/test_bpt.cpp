#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <numeric>

#include "bufprop/bpt.hpp"
#include "bufprop/oracle.hpp"
#include "bufprop/workloads.hpp"

using namespace bufprop;
using namespace bufprop::bpt;
using machine::Machine;

namespace {

std::vector<Key> keys_1_to(std::uint64_t n) {
  std::vector<Key> v(n);
  std::iota(v.begin(), v.end(), Key(1));
  return v;
}

}  // namespace

TEST_CASE("route: right-closed pivot intervals") {
  CHECK(route_index({10}, 10) == 0);  // (-inf, p1]
  CHECK(route_index({10}, 11) == 1);
  CHECK(route_index({3, 7, 12}, 7) == 1);
  CHECK(route_index({3, 7, 12}, 8) == 2);
  CHECK(route_index({3, 7, 12}, 13) == 3);
  CHECK(route_index({3, 7, 12}, -5) == 0);
}

TEST_CASE("enqueue_message: overflow trigger and per-key dedup") {
  Node node;
  node.range = KeyRange::all();
  node.pivots = {100};
  node.children.resize(2);
  node.buffers.resize(2);

  CHECK(!enqueue_message(node, {5, 1, 1}, 4));  // empty buffer, one insert
  CHECK(!enqueue_message(node, {6, 1, 2}, 4));
  CHECK(!enqueue_message(node, {7, 1, 3}, 4));
  CHECK(!enqueue_message(node, {8, 1, 4}, 4));  // buffer now at 4/4
  CHECK(enqueue_message(node, {9, 1, 5}, 4));   // one more: trigger

  // Two updates to one key occupy a single slot; the newest payload wins.
  Node n2;
  n2.range = KeyRange::all();
  n2.children.resize(1);
  n2.buffers.resize(1);
  enqueue_message(n2, {5, 10, 1}, 8);
  enqueue_message(n2, {5, 20, 2}, 8);
  CHECK(n2.buffers[0].size() == 1);
  CHECK(n2.buffers[0].find(5)->val == 20);
}

TEST_CASE("flush batch rule: floor of the overflow factor, at least one") {
  CHECK(flush_batches(4, 4) == 1);   // exactly one capacity's worth
  CHECK(flush_batches(5, 4) == 1);   // barely over: still one batch
  CHECK(flush_batches(12, 4) == 3);  // overflowed 3x: three batch charges
  CHECK(flush_batches(13, 4) == 3);
  CHECK(flush_batches(1, 4) == 1);
  CHECK(flush_batches(0, 4) == 1);   // callers skip empty buffers
}

TEST_CASE("flush of one batch charges 2 flush I/Os at the first hop") {
  Machine m(64);  // B=64, fanout 4 -> capacity 16
  Tree t(m, 4);
  t.bulk_load(keys_1_to(256));
  REQUIRE(t.height() == cost::ceil_log(4, t.leaf_count()));

  // Fill one root child buffer past capacity with distinct keys in one
  // child's range to force exactly one single-batch flush at the root.
  std::uint64_t cap = t.buffer_capacity();
  std::uint64_t before = m.ledger().flush_io;
  for (std::uint64_t i = 0; i < cap; ++i) {
    t.write(Op::update(Key(1 + i), 7));
    CHECK(m.ledger().flush_io == before);  // at capacity, not over: no flush yet
  }
  t.write(Op::update(Key(cap + 1), 7));
  CHECK(m.ledger().flush_io >= before + 2);
  CHECK(m.ledger().flush_io <= before + 2 * std::uint64_t(t.height()));
}

TEST_CASE("queries see the newest buffered message first") {
  Machine m(64);
  Tree t(m, 4);
  t.bulk_load(keys_1_to(256));
  t.write(Op::update(17, 111));
  CHECK(t.query(17) == Word(111));  // still in the root buffer
  t.write(Op::update(17, 222));
  CHECK(t.query(17) == Word(222));
  CHECK(t.query(17000) == std::nullopt);  // absent key, same path cost
}

TEST_CASE("uniform fanout query cost is exactly height+1 when uncached") {
  for (std::uint64_t f : {2ull, 4ull, 16ull}) {
    Machine m(64);
    Tree t(m, f);
    t.bulk_load(keys_1_to(1024));  // 16 leaves of 64
    std::uint64_t lam = t.leaf_count();
    REQUIRE(lam == 16);
    int h = t.height();
    CHECK(h == cost::ceil_log(f, lam));
    std::uint64_t before = m.ledger().search_io;
    t.query(500);
    CHECK(m.ledger().search_io - before == std::uint64_t(h) + 1);
  }
}

TEST_CASE("single leaf tree: query costs 1, writes apply in place") {
  Machine m(4096);
  Tree t(m, 4);
  t.bulk_load(keys_1_to(100));
  CHECK(t.height() == 0);
  std::uint64_t before = m.ledger().total();
  CHECK(t.query(5) == Word(0));
  CHECK(m.ledger().total() == before + 1);
  t.write(Op::update(5, 42));
  CHECK(m.ledger().total() == before + 1);  // no batch hops exist
  CHECK(t.query(5) == Word(42));
}

TEST_CASE("leaf split keeps the tree valid and splits are free by default") {
  Machine m(16);  // B=16: leaf target 8, split at 32
  Tree t(m, 4);
  t.bulk_load(keys_1_to(64));
  t.validate();
  std::uint64_t leaves_before = t.leaf_count();
  for (int i = 0; i < 80; ++i) t.write(Op::insert(Key(100000 + i), 1));
  CHECK(t.leaf_count() > leaves_before);
  CHECK(m.ledger().split_io == 0);
  t.validate();
}

TEST_CASE("charged splits cost 4 I/Os per split") {
  Machine m(16);
  CostPolicy pol;
  pol.charge_splits = true;
  Tree t(m, 4, pol);
  t.bulk_load(keys_1_to(16));  // one leaf, size 16
  // 16 more fresh keys reach the 4*target=32 threshold exactly once.
  for (int i = 0; i < 16; ++i) t.write(Op::insert(Key(1000 + i), 1));
  CHECK(t.leaf_count() == 2);
  CHECK(m.ledger().split_io == 4);
}

TEST_CASE("insert storm cascades splits upward and keeps the tree valid") {
  Machine m(16);
  Tree t(m, 2);
  t.bulk_load(keys_1_to(32));
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::InsertStorm;
  s.n = 2048;
  s.op_count = 2048;
  s.mix = 0.0;
  s.seed = 5;
  int before_height = t.height();
  for (const Op& op : workloads::generate(s)) t.write(Op::insert(op.key + 1000000, op.val));
  t.validate();
  CHECK(t.height() > before_height);
}

TEST_CASE("batch_rebuild: identity charges 2|X| rebuild I/Os, keeps structure") {
  Machine m(64);
  Tree t(m, 4);
  t.bulk_load(keys_1_to(1024));
  std::uint64_t x = t.internal_node_count();
  int h = t.height();
  std::uint64_t before = m.ledger().rebuild_io;
  CHECK(t.batch_rebuild(4));
  CHECK(m.ledger().rebuild_io - before == 2 * x);
  CHECK(t.internal_node_count() == x);
  CHECK(t.height() == h);
}

TEST_CASE("batch_rebuild rejects invalid fanouts with no state change") {
  Machine m(64);
  Tree t(m, 4);
  t.bulk_load(keys_1_to(1024));
  std::uint64_t nodes = t.internal_node_count();
  std::uint64_t io = m.ledger().total();
  CHECK(!t.batch_rebuild(3));    // not a power of two
  CHECK(!t.batch_rebuild(128));  // exceeds B
  CHECK(t.internal_node_count() == nodes);
  CHECK(m.ledger().total() == io);
}

TEST_CASE("internal rebuild touches only the internal blocks, answers survive") {
  Machine m(64);
  Tree t(m, 64);
  t.bulk_load(keys_1_to(64 * 64));  // 64 leaves
  REQUIRE(t.leaf_count() == 64);
  t.write(Op::update(100, 9));
  t.write(Op::update(2000, 8));

  std::uint64_t before = m.ledger().rebuild_io;
  std::uint64_t charged = t.rebuild_internal(8);
  // Old internal: 1 root at fanout 64. New at fanout 8: 8 bottom + 1 root.
  CHECK(charged == 9);  // new layer of 8 plus a root
  CHECK(m.ledger().rebuild_io - before == charged);
  CHECK(t.query(100) == Word(9));
  CHECK(t.query(2000) == Word(8));
  t.validate();

  CHECK(t.rebuild_internal(8) == 0);  // same fanout: no-op, zero charge
}

TEST_CASE("rebuild overflow repair charges batch flushes afterwards") {
  Machine m(64);
  Tree t(m, 2);  // capacity 32 per buffer
  t.bulk_load(keys_1_to(2048));
  for (int i = 0; i < 300; ++i) t.write(Op::update(Key(1 + (i * 97) % 2048), i));
  std::uint64_t flush_before = m.ledger().flush_io;
  t.rebuild_internal(32);
  t.validate();
  CHECK(t.query(Key(1 + 97)).has_value());
  CHECK(m.ledger().flush_io >= flush_before);
}

TEST_CASE("message conservation: issued = applied + buffered + superseded") {
  Machine m(32);
  Tree t(m, 4);
  t.bulk_load(keys_1_to(256));
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::UniformRandom;
  s.n = 256;
  s.op_count = 3000;
  s.mix = 0.2;
  s.seed = 11;
  for (const Op& op : workloads::generate(s)) t.execute(op);
  CHECK(t.issued() == t.applied() + t.buffered() + t.superseded());
  t.drain();
  CHECK(t.buffered() == 0);
  CHECK(t.issued() == t.applied() + t.superseded());
  t.validate();
}

TEST_CASE("semantic equivalence with the flat-map oracle") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    workloads::WorkloadSpec s;
    s.kind = workloads::Kind::UniformRandom;
    s.n = 512;
    s.op_count = 4000;
    s.mix = 0.5;
    s.seed = seed;
    Trace trace = workloads::generate(s);
    std::vector<Key> preload = keys_1_to(512);

    Machine m(64);
    Tree t(m, 8);
    t.bulk_load(preload);
    auto expected = oracle::semantic_oracle(preload, trace);
    std::size_t qi = 0;
    for (const Op& op : trace) {
      std::optional<Word> got;
      t.execute(op, &got);
      if (op.kind == OpKind::Query) {
        CHECK(got == expected[qi]);
        ++qi;
      }
    }
    t.validate();
  }
}

TEST_CASE("semantic equivalence under inserts that split the tree") {
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::InsertStorm;
  s.n = 4096;
  s.op_count = 4096;
  s.mix = 0.0;
  s.seed = 3;
  Trace inserts = workloads::generate(s);
  // Interleave queries over the inserted prefix.
  Trace trace;
  for (std::size_t i = 0; i < inserts.size(); ++i) {
    trace.push_back(inserts[i]);
    if (i % 3 == 2) trace.push_back(Op::query(inserts[i / 2].key));
  }
  Machine m(32);
  Tree t(m, 4);
  t.bulk_load({});
  auto expected = oracle::semantic_oracle({}, trace);
  std::size_t qi = 0;
  for (const Op& op : trace) {
    std::optional<Word> got;
    t.execute(op, &got);
    if (op.kind == OpKind::Query) CHECK(got == expected[qi++]);
  }
  t.validate();
}

TEST_CASE("beps runs: f=B behaves as a B-tree; all-query traces never flush") {
  std::vector<Key> preload = keys_1_to(4096);
  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::QueryStorm;
  s.n = 4096;
  s.op_count = 500;
  s.mix = 1.0;
  Trace trace = workloads::generate(s);

  auto ledger = beps_tree_run(trace, 64, 64, preload);
  CHECK(ledger.flush_io == 0);
  CHECK(ledger.split_io == 0);
  // f=B over 64 leaves: height 1, every query costs exactly 2 I/Os.
  CHECK(ledger.search_io == 500 * 2);
}

TEST_CASE("beps write cost stays within the no-dedup hop bound") {
  const int b = 64;
  const std::uint64_t f = 8;  // sqrt(B)
  std::vector<Key> preload = keys_1_to(4096);

  workloads::WorkloadSpec s;
  s.kind = workloads::Kind::UniformRandom;
  s.n = 4096;
  s.op_count = 6000;
  s.mix = 0.0;
  s.seed = 9;
  Trace trace = workloads::generate(s);

  auto ledger = beps_tree_run(trace, f, b, preload);
  Machine m(b);
  Tree shape(m, f);
  shape.bulk_load(preload);
  std::uint64_t hops = cost::ceil_log(f, shape.leaf_count());
  // Each message rides `hops` batch hops of size B/f at 2 I/Os each, plus
  // per-buffer residues that never flushed.
  std::uint64_t upper = 2 * 6000 * hops * f / b + 2 * hops * 4096 / b * f;
  CHECK(ledger.flush_io > 0);
  CHECK(ledger.flush_io <= upper);
  CHECK(ledger.search_io == 0);
}
