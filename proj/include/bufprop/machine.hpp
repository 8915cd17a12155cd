// Disk-Access-Model simulator: a block store, a size-threshold pinned cache,
// and categorized I/O accounting. Every tree in this repo charges its block
// touches here; the machine itself never interprets payloads.
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace bufprop::machine {

using Word = std::int64_t;

// Simulation fault: an impossible block access. Indicates a tree bug, not a
// recoverable condition.
struct SimulationFault : std::logic_error {
  using std::logic_error::logic_error;
};

struct BlockId {
  std::uint64_t v = 0;
  friend bool operator==(BlockId a, BlockId b) { return a.v == b.v; }
  friend bool operator<(BlockId a, BlockId b) { return a.v < b.v; }
};

enum class IoCategory { Search, Flush, Rebuild, Split };

const char* to_string(IoCategory c);

// I/O counters partitioned by category. K is the speed-limit factor: batch
// rebuilds are charged K-fold in charged_total(), modeling a tree that may
// spend at most a 1/K fraction of its I/Os restructuring.
struct CostLedger {
  std::uint64_t search_io = 0;
  std::uint64_t flush_io = 0;
  std::uint64_t rebuild_io = 0;
  std::uint64_t split_io = 0;
  double speed_limit_k = 1.0;

  std::uint64_t total() const { return search_io + flush_io + rebuild_io + split_io; }
  double charged_total() const {
    return double(search_io + flush_io + split_io) + speed_limit_k * double(rebuild_io);
  }
  double rebuild_fraction() const {
    return double(rebuild_io) / double(total() > 0 ? total() : 1);
  }
  std::uint64_t by_category(IoCategory c) const;

  CostLedger operator-(const CostLedger& o) const {
    CostLedger d = *this;
    d.search_io -= o.search_io;
    d.flush_io -= o.flush_io;
    d.rebuild_io -= o.rebuild_io;
    d.split_io -= o.split_io;
    return d;
  }
  friend bool operator==(const CostLedger& a, const CostLedger& b) {
    return a.search_io == b.search_io && a.flush_io == b.flush_io &&
           a.rebuild_io == b.rebuild_io && a.split_io == b.split_io;
  }
};

// View of a ledger restricted to speed-limit accounting.
struct SpeedLimitLedger {
  const CostLedger* ledger;
  double k() const { return ledger->speed_limit_k; }
  double rebuild_fraction() const { return ledger->rebuild_fraction(); }
  double charged_total() const { return ledger->charged_total(); }
};

// Logical block payload. The model is count-based: `words` is the occupancy
// that the block-size invariant is checked against; `data` optionally carries
// materialized content for callers that read values back.
struct Payload {
  std::uint32_t words = 0;
  std::vector<Word> data;
};

// Pure pin-by-size cache: a block is pinned iff its owning node's key-range
// size is at least `threshold_keys`. Accesses to pinned blocks cost nothing.
// There are no eviction dynamics; owners re-declare sizes as they change.
class Cache {
 public:
  explicit Cache(std::uint64_t threshold_keys = NEVER)
      : threshold_keys_(threshold_keys ? threshold_keys : 1) {}

  // Sentinel threshold that no key range reaches: caching disabled.
  static constexpr std::uint64_t NEVER = UINT64_MAX;

  std::uint64_t threshold_keys() const { return threshold_keys_; }
  bool is_pinned(BlockId id) const { return pinned_.count(id.v) != 0; }

  // Declare the key-range size of the node owning `blocks`. All of a node's
  // blocks pin or unpin together.
  void note_node_size(const std::vector<BlockId>& blocks, std::uint64_t range_keys) {
    if (range_keys >= threshold_keys_) {
      for (BlockId b : blocks) pinned_.insert(b.v);
    } else {
      for (BlockId b : blocks) pinned_.erase(b.v);
    }
  }
  void note_node_size(BlockId block, std::uint64_t range_keys) {
    if (range_keys >= threshold_keys_) {
      pinned_.insert(block.v);
    } else {
      pinned_.erase(block.v);
    }
  }
  void forget(BlockId block) { pinned_.erase(block.v); }

 private:
  std::uint64_t threshold_keys_;
  std::unordered_set<std::uint64_t> pinned_;
};

// Observer for charged I/Os. The jello tree hangs per-supernode and per-micro
// clocks off this hook; listeners see only I/Os that actually cost something.
using IoListener = std::function<void(IoCategory, std::uint64_t)>;

// External memory: BlockId -> payload, plus the ledger every access charges.
class BlockStore {
 public:
  explicit BlockStore(int block_size_b) : block_size_b_(block_size_b) {
    if (block_size_b <= 0) throw std::invalid_argument("block size must be positive");
  }

  int block_size_b() const { return block_size_b_; }
  CostLedger& ledger() { return ledger_; }
  const CostLedger& ledger() const { return ledger_; }

  // Ids are never reused within a run.
  BlockId allocate() { return BlockId{next_id_++}; }
  BlockId allocate(Payload p) {
    BlockId id{next_id_++};
    check_fits(p);
    blocks_[id.v] = std::move(p);
    return id;
  }
  void deallocate(BlockId id) { blocks_.erase(id.v); }
  bool exists(BlockId id) const { return blocks_.count(id.v) != 0; }
  std::size_t block_count() const { return blocks_.size(); }

  void charge(IoCategory c, std::uint64_t n = 1);

  void add_listener(IoListener* l) { listeners_.push_back(l); }
  void remove_listener(IoListener* l) {
    for (auto it = listeners_.begin(); it != listeners_.end(); ++it)
      if (*it == l) {
        listeners_.erase(it);
        return;
      }
  }

  friend const Payload& read_block(BlockStore& store, const Cache& cache, BlockId id,
                                   IoCategory category);
  friend void write_block(BlockStore& store, const Cache& cache, BlockId id, Payload payload,
                          IoCategory category);

 private:
  void check_fits(const Payload& p) const {
    if (p.words > std::uint32_t(block_size_b_) || p.data.size() > p.words)
      throw SimulationFault("payload exceeds block size B");
  }

  int block_size_b_;
  std::uint64_t next_id_ = 1;
  std::unordered_map<std::uint64_t, Payload> blocks_;
  CostLedger ledger_;
  std::vector<IoListener*> listeners_;
};

// Read a block; charges one I/O in `category` unless the block is pinned.
const Payload& read_block(BlockStore& store, const Cache& cache, BlockId id, IoCategory category);

// Write a block; same charging rule as read_block. Faults on oversize payload.
void write_block(BlockStore& store, const Cache& cache, BlockId id, Payload payload,
                 IoCategory category);

// Batch-rebuild accounting: blocks_touched I/Os in the rebuild category,
// which charged_total() scales by K.
void charge_rebuild(CostLedger& ledger, std::uint64_t blocks_touched);

// Store + cache bundle trees carry around.
struct Machine {
  BlockStore store;
  Cache cache;

  Machine(int block_size_b, std::uint64_t cache_threshold_keys = Cache::NEVER)
      : store(block_size_b), cache(cache_threshold_keys) {}

  int B() const { return store.block_size_b(); }
  CostLedger& ledger() { return store.ledger(); }
  const CostLedger& ledger() const { return store.ledger(); }

  // Convenience wrappers for model-only nodes that track word counts.
  const Payload& read(BlockId id, IoCategory c) { return read_block(store, cache, id, c); }
  void write(BlockId id, std::uint32_t words, IoCategory c) {
    write_block(store, cache, id, Payload{words, {}}, c);
  }
};

// Scoped I/O listener registration.
class IoScope {
 public:
  IoScope(BlockStore& store, IoListener fn) : store_(&store), fn_(std::move(fn)) {
    store_->add_listener(&fn_);
  }
  ~IoScope() { store_->remove_listener(&fn_); }
  IoScope(const IoScope&) = delete;
  IoScope& operator=(const IoScope&) = delete;

 private:
  BlockStore* store_;
  IoListener fn_;
};

}  // namespace bufprop::machine
