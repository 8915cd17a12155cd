#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "bufprop/machine.hpp"
#include "bufprop/workloads.hpp"

using namespace bufprop;
using namespace bufprop::machine;

namespace {

Payload words(std::uint32_t n) { return Payload{n, {}}; }

}  // namespace

TEST_CASE("read of a pinned block is free") {
  Machine m(4096, 1);  // threshold 1: everything pinned once sized
  BlockId root = m.store.allocate(words(10));
  m.cache.note_node_size(root, 100);
  read_block(m.store, m.cache, root, IoCategory::Search);
  CHECK(m.ledger().total() == 0);
}

TEST_CASE("read of an unpinned block charges its category") {
  Machine m(4096);
  BlockId leaf = m.store.allocate(words(10));
  read_block(m.store, m.cache, leaf, IoCategory::Search);
  CHECK(m.ledger().search_io == 1);
  CHECK(m.ledger().flush_io == 0);
  CHECK(m.ledger().total() == 1);
}

TEST_CASE("five reads of distinct unpinned blocks cost five") {
  // Hand-counted trace: each uncached touch is exactly one I/O.
  Machine m(4096);
  std::vector<BlockId> ids;
  for (int i = 0; i < 5; ++i) ids.push_back(m.store.allocate(words(1)));
  std::uint64_t expected = 0;
  for (BlockId id : ids) {
    read_block(m.store, m.cache, id, expected % 2 ? IoCategory::Search : IoCategory::Flush);
    ++expected;
    CHECK(m.ledger().total() == expected);
  }
  CHECK(m.ledger().total() == 5);
}

TEST_CASE("write to a pinned block is free; unpinned write charges flush") {
  Machine m(4096, 1);
  BlockId pinned = m.store.allocate(words(0));
  m.cache.note_node_size(pinned, 5);
  write_block(m.store, m.cache, pinned, words(7), IoCategory::Flush);
  CHECK(m.ledger().total() == 0);

  Machine m2(4096);
  BlockId id = m2.store.allocate(words(0));
  write_block(m2.store, m2.cache, id, words(7), IoCategory::Flush);
  CHECK(m2.ledger().flush_io == 1);
}

TEST_CASE("overwrite then read back returns the last payload") {
  Machine m(64);
  BlockId id = m.store.allocate(Payload{3, {1, 2, 3}});
  write_block(m.store, m.cache, id, Payload{2, {9, 8}}, IoCategory::Flush);
  const Payload& p = read_block(m.store, m.cache, id, IoCategory::Search);
  CHECK(p.words == 2);
  CHECK(p.data == std::vector<Word>{9, 8});
}

TEST_CASE("oversize payload and unknown block fault") {
  Machine m(8);
  BlockId id = m.store.allocate(words(0));
  CHECK_THROWS_AS(write_block(m.store, m.cache, id, words(9), IoCategory::Flush),
                  SimulationFault);
  CHECK_THROWS_AS(read_block(m.store, m.cache, BlockId{12345}, IoCategory::Search),
                  SimulationFault);
}

TEST_CASE("charge_rebuild and the speed-limited charged total") {
  CostLedger l;
  l.speed_limit_k = 8.0;
  charge_rebuild(l, 0);
  CHECK(l.rebuild_io == 0);
  // K=8, rebuild replacing |X|=2 nodes by |Y|=3.
  double before = l.charged_total();
  charge_rebuild(l, 2 + 3);
  CHECK(l.rebuild_io == 5);
  CHECK(l.charged_total() - before == doctest::Approx(40.0));
}

TEST_CASE("rebuild fraction arithmetic") {
  CostLedger l;
  l.search_io = 990;
  l.rebuild_io = 10;
  l.speed_limit_k = 1.0;
  CHECK(l.rebuild_fraction() == doctest::Approx(0.01));
  CHECK(l.total() == 1000);
}

TEST_CASE("speed-limit ledger view mirrors its cost ledger") {
  CostLedger l;
  l.speed_limit_k = 16.0;
  l.search_io = 50;
  l.rebuild_io = 10;
  SpeedLimitLedger view{&l};
  CHECK(view.k() == 16.0);
  CHECK(view.rebuild_fraction() == doctest::Approx(10.0 / 60.0));
  CHECK(view.charged_total() == doctest::Approx(50.0 + 16.0 * 10.0));
}

TEST_CASE("whole nodes pin and unpin together across all their blocks") {
  Machine m(64, 100);
  std::vector<BlockId> node = {m.store.allocate(words(1)), m.store.allocate(words(1))};
  m.cache.note_node_size(node, 150);  // above threshold: both pinned
  read_block(m.store, m.cache, node[0], IoCategory::Search);
  read_block(m.store, m.cache, node[1], IoCategory::Search);
  CHECK(m.ledger().total() == 0);
  m.cache.note_node_size(node, 50);  // below: both unpinned
  read_block(m.store, m.cache, node[0], IoCategory::Search);
  read_block(m.store, m.cache, node[1], IoCategory::Search);
  CHECK(m.ledger().total() == 2);
}

TEST_CASE("determinism: replaying a touch trace yields an identical ledger") {
  auto run = [] {
    Machine m(256);
    std::vector<BlockId> ids;
    for (int i = 0; i < 32; ++i) ids.push_back(m.store.allocate(words(1)));
    for (int i = 0; i < 1000; ++i) {
      std::uint64_t r = workloads::splitmix64(i);
      BlockId id = ids[r % ids.size()];
      m.cache.note_node_size(id, r % 300);
      if (r % 3 == 0)
        write_block(m.store, m.cache, id, words(r % 200), IoCategory::Flush);
      else
        read_block(m.store, m.cache, id, r % 2 ? IoCategory::Search : IoCategory::Rebuild);
    }
    return m.ledger();
  };
  CHECK(run() == run());
}

TEST_CASE("cache monotonicity: raising the threshold never lowers any category") {
  auto run = [](std::uint64_t threshold) {
    Machine m(256, threshold);
    std::vector<BlockId> ids;
    for (int i = 0; i < 16; ++i) ids.push_back(m.store.allocate(words(1)));
    for (int i = 0; i < 2000; ++i) {
      std::uint64_t r = workloads::splitmix64(1000 + i);
      BlockId id = ids[r % ids.size()];
      m.cache.note_node_size(id, r % 512);  // node size is trace state, not policy
      switch (r % 4) {
        case 0: read_block(m.store, m.cache, id, IoCategory::Search); break;
        case 1: read_block(m.store, m.cache, id, IoCategory::Flush); break;
        case 2: write_block(m.store, m.cache, id, words(3), IoCategory::Rebuild); break;
        default: write_block(m.store, m.cache, id, words(3), IoCategory::Split); break;
      }
    }
    return m.ledger();
  };
  CostLedger lo = run(64), hi = run(200);
  CHECK(hi.search_io >= lo.search_io);
  CHECK(hi.flush_io >= lo.flush_io);
  CHECK(hi.rebuild_io >= lo.rebuild_io);
  CHECK(hi.split_io >= lo.split_io);
}

TEST_CASE("conservation: category deltas sum to uncached touches") {
  Machine m(256, 100);
  std::vector<BlockId> ids;
  for (int i = 0; i < 8; ++i) ids.push_back(m.store.allocate(words(1)));
  std::uint64_t uncached_touches = 0;
  for (int i = 0; i < 500; ++i) {
    std::uint64_t r = workloads::splitmix64(77 + i);
    BlockId id = ids[r % ids.size()];
    std::uint64_t sz = r % 140;
    m.cache.note_node_size(id, sz);
    if (sz < 100) ++uncached_touches;
    read_block(m.store, m.cache, id, IoCategory::Search);
  }
  CHECK(m.ledger().total() == uncached_touches);
}

TEST_CASE("io listeners observe only charged touches") {
  Machine m(64, 10);
  BlockId a = m.store.allocate(words(0));
  BlockId b = m.store.allocate(words(0));
  m.cache.note_node_size(a, 50);  // pinned
  std::uint64_t seen = 0;
  IoScope scope(m.store, [&](IoCategory, std::uint64_t n) { seen += n; });
  read_block(m.store, m.cache, a, IoCategory::Search);
  read_block(m.store, m.cache, b, IoCategory::Search);
  CHECK(seen == 1);
}
