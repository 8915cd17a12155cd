// Buffered-propagation node mechanics (pivots, per-child buffers, flushes,
// balanced splits, batch rebuilds) and the uniform-fanout tree they assemble
// into. The fixed I/O constants live here: a query visit costs 1 I/O per
// uncached node, one buffer flush costs 2 I/Os per capacity-sized batch, and
// a balanced split costs 4 I/Os when split charging is on.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "bufprop/machine.hpp"
#include "bufprop/types.hpp"

namespace bufprop::bpt {

constexpr std::uint64_t kFlushIosPerBatch = 2;  // read child + write child
constexpr std::uint64_t kSplitIos = 4;          // read node, write halves, rewrite parent

// Balanced splits are free for adversary/oracle baselines; the jello tree
// charges its own.
struct CostPolicy {
  bool charge_splits = false;
};

// Index j of the child whose right-closed range (p_{j-1}, p_j] contains key.
int route_index(const std::vector<Key>& pivots, Key key);

// Batch count for flushing a buffer holding `occupancy` messages at the given
// capacity: floor of the overflow factor, at least one. A buffer overflowed
// k-fold flushes as floor(k) capacity-sized batches.
inline std::uint64_t flush_batches(std::uint64_t occupancy, std::uint64_t capacity) {
  return std::max<std::uint64_t>(1, occupancy / std::max<std::uint64_t>(1, capacity));
}

// Per-child message buffer. One slot per key; the newest message wins.
struct Buffer {
  std::map<Key, Message> msgs;

  std::size_t size() const { return msgs.size(); }
  bool empty() const { return msgs.empty(); }
  // Returns false if the message superseded an older one for the same key
  // (occupancy unchanged).
  bool add(const Message& m) {
    auto [it, fresh] = msgs.try_emplace(m.key, m);
    if (!fresh && m.seq >= it->second.seq) it->second = m;
    return fresh;
  }
  const Message* find(Key k) const {
    auto it = msgs.find(k);
    return it == msgs.end() ? nullptr : &it->second;
  }
};

struct Node;

struct Leaf {
  machine::BlockId block;
  KeyRange range;
  std::map<Key, Word> data;
  std::uint64_t size_keys = 0;  // keys in range, counting buffered inserts above
  Node* parent = nullptr;
};

struct Child {
  Node* node = nullptr;
  Leaf* leaf = nullptr;
};

struct Node {
  machine::BlockId block;
  KeyRange range;
  std::vector<Key> pivots;  // children.size() - 1 of them
  std::vector<Child> children;
  std::vector<Buffer> buffers;  // parallel to children
  std::uint64_t target_size = 0;
  std::uint64_t size_keys = 0;
  Node* parent = nullptr;

  std::size_t fanout() const { return children.size(); }
  std::uint64_t buffered_messages() const {
    std::uint64_t n = 0;
    for (const Buffer& b : buffers) n += b.size();
    return n;
  }
};

// Appends msg to the routed child's buffer; returns whether that buffer now
// exceeds `capacity`.
bool enqueue_message(Node& node, const Message& msg, std::uint64_t capacity);

// Uniform-fanout buffered-propagation tree over key/value leaves. Leaves have
// target size B/2; node targets are fanout^level * B/2; every actual size
// stays within [target, 4*target] (root and rightmost-per-level exempt below).
class Tree {
 public:
  Tree(machine::Machine& m, std::uint64_t fanout, CostPolicy policy = {});

  // Builds leaves of fill B from sorted keys (value 0 each) at zero I/O cost;
  // this is the starting configuration, not simulated work.
  void bulk_load(const std::vector<Key>& sorted_keys);

  std::optional<Word> query(Key key);
  void write(const Op& op);  // Insert/Update; update to absent key upserts
  void execute(const Op& op, std::optional<Word>* answer = nullptr);

  // Rebuilds the internal layers at `new_fanout`, leaves untouched. Charges
  // (#old + #new) internal blocks as rebuild I/O; buffered messages are
  // redistributed and overflow flushes follow at their usual cost. Returns
  // blocks charged. No-op returning 0 when new_fanout == fanout().
  std::uint64_t rebuild_internal(std::uint64_t new_fanout);

  // Generic batch rebuild entry: validates that relayering at new_fanout
  // yields a valid tree; rejects (returns false, no state change) otherwise.
  bool batch_rebuild(std::uint64_t new_fanout);

  std::uint64_t fanout() const { return fanout_; }
  std::uint64_t buffer_capacity() const { return cap_; }
  int height() const;  // internal levels; 0 for a single leaf
  std::uint64_t leaf_count() const { return leaves_.size(); }
  std::uint64_t key_count() const { return present_.size(); }
  std::uint64_t internal_node_count() const { return nodes_.size(); }

  // Message-conservation counters (sequence audit).
  std::uint64_t issued() const { return issued_; }
  std::uint64_t applied() const { return applied_; }
  std::uint64_t superseded() const { return superseded_; }
  std::uint64_t buffered() const;

  std::uint64_t max_buffer_overflow_seen() const { return max_overflow_seen_; }

  // Forces every buffer down to the leaves (normal flush charges).
  void drain();

  // Structural audit; throws InvariantFailure on violation.
  void validate() const;

  machine::Machine& machine() { return *m_; }
  const std::vector<std::unique_ptr<Leaf>>& leaves() const { return leaves_; }
  Node* root() { return root_; }

 private:
  Leaf* route_to_leaf(Key key) const;
  void deposit(Node* node, Message msg);
  void flush(Node* node, std::size_t child_idx);
  void apply_to_leaf(Leaf* leaf, const Buffer& batch);
  void note_new_key(Key key);
  void split_leaf(Leaf* leaf);
  void split_node(Node* node);
  void maybe_split_upward(Node* node);
  void build_internal(std::uint64_t fanout);
  std::uint64_t recount_range(const KeyRange& r) const;
  void refresh_pin(Node* n);
  void refresh_pin(Leaf* l);

  machine::Machine* m_;
  std::uint64_t fanout_;
  std::uint64_t cap_;
  CostPolicy policy_;
  std::vector<std::unique_ptr<Leaf>> leaves_;  // left-to-right
  std::vector<std::unique_ptr<Node>> nodes_;
  Node* root_ = nullptr;  // null while the tree is a single leaf
  std::set<Key> present_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t issued_ = 0;
  std::uint64_t applied_ = 0;
  std::uint64_t superseded_ = 0;
  std::uint64_t max_overflow_seen_ = 0;
};

// Runs a whole trace on a uniform-fanout tree preloaded with `preload` keys;
// returns the ledger.
machine::CostLedger beps_tree_run(const Trace& trace, std::uint64_t fanout, int block_size_b,
                                  const std::vector<Key>& preload,
                                  std::uint64_t cache_threshold = machine::Cache::NEVER,
                                  double speed_limit_k = 1.0);

}  // namespace bufprop::bpt
