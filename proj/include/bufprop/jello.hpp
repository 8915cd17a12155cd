// The jello tree: supernodes of fanout B^delta whose internal buffers are two
// layers of micro-supernodes of fanout B^{delta/2}, each carrying up to three
// shortcut slots and fanout-convergent segment trees, driven by shortcut
// convergence windows with geometrically growing phases. Also the fixed-pivot
// variant, whose supernode buffers are single fanout-convergent trees rebuilt
// periodically.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "bufprop/bpt.hpp"
#include "bufprop/cost_model.hpp"
#include "bufprop/fct.hpp"
#include "bufprop/machine.hpp"
#include "bufprop/types.hpp"

namespace bufprop::jello {

struct Config {
  int b = 4096;
  double delta = 0.5;
  // Cache thresholds: a node is pinned iff its key-range size reaches
  // n / (c * B^{3 delta}) in the augmented preset, n / c in the equal preset.
  // c == 0 disables caching.
  double cache_c = 0.0;
  bool cache_augmented = true;
  double speed_limit_k = 1.0;
  double rho_upper = 0.125;  // phase growth fraction, non-bottom supernodes
  int c_phase = 4;           // T = c_phase * B^{d/2} * log2(B^{d/2})
  bool charge_splits = true;

  std::uint64_t bd() const;   // B^delta
  std::uint64_t bd2() const;  // B^{delta/2}
  double rho_bottom() const { return std::min(rho_upper, delta); }
  std::uint64_t min_phase_len() const;  // T
  std::uint64_t micro_converge_threshold() const { return min_phase_len(); }
  std::uint64_t cache_threshold(std::uint64_t n) const;
  void validate(std::uint64_t n) const;
};

// l-split cost (scaled by B): best fanout-convergent cost left of the leaf,
// plus right of it, plus the shortcut cost R_ell + 2*W_ell/B of the leaf.
cost::Scaled ell_split_cost_scaled(std::uint64_t b, std::uint64_t lambda_left,
                                   std::uint64_t r_left, std::uint64_t w_left,
                                   std::uint64_t lambda_right, std::uint64_t r_right,
                                   std::uint64_t w_right, std::uint64_t r_ell,
                                   std::uint64_t w_ell);

struct DataLeaf {
  machine::BlockId block;
  KeyRange range;
  std::map<Key, Word> data;
  std::uint64_t size_keys = 0;
};

struct Supernode;

// A child of a supernode: a data leaf (height 1) or a deeper supernode, with
// the per-leaf counters that drive shortcut selection.
struct Port {
  std::unique_ptr<DataLeaf> leaf;
  std::unique_ptr<Supernode> sub;
  std::uint64_t win_r = 0, win_w = 0;    // since window start
  std::uint64_t life_r = 0, life_w = 0;  // since supernode birth

  KeyRange range() const;
  std::uint64_t size_keys() const;
  bool is_leaf() const { return leaf != nullptr; }
};

// Fanout-convergent tree over a contiguous run of a micro-supernode's units.
// Units are addressed by position within the segment. A single-unit segment
// is one fanout-1 node whose buffer holds up to B messages.
class SegmentFct {
 public:
  // unit_his: routing boundaries, hi key of every unit but the last
  // (so unit count = unit_his.size() + 1).
  SegmentFct(machine::Machine& m, std::vector<Key> unit_his, std::uint64_t keys_covered);

  struct Delivery {
    std::size_t unit = 0;             // segment-local position
    std::uint64_t batches = 1;        // batch hops charged by the producer
    std::vector<Message> msgs;
  };

  // Deposit into the root (free); overflow flushes charge internally and emit
  // bottom-hop deliveries (charged here, routed by the owner).
  void deposit(const Message& msg, std::vector<Delivery>& out);
  // Query path: one search I/O per node consulted; newest buffered message.
  const Message* query_path(Key key, std::size_t unit);
  // Count an executed op; convergence rebuilds may emit deliveries.
  void after_op(OpKind kind, std::vector<Delivery>& out);
  // Restart the convergence epoch from scratch (periodic/forced).
  void force_restart(std::vector<Delivery>& out);
  // Unit at `pos` split in two at `pivot`.
  void split_unit(std::size_t pos, Key pivot);
  // Teardown: hand all buffered messages out, uncharged, then the owner
  // charges its clobber policy. Blocks must be released separately.
  void take_all(std::vector<Delivery>& out);
  void release_blocks();

  std::size_t unit_count() const { return units_; }
  std::uint64_t physical_fanout() const { return physical_; }
  std::uint64_t node_count() const { return nodes_.size(); }
  machine::BlockId ingress_block() const { return nodes_[root_].block; }
  std::uint64_t buffered() const;
  void collect_messages(std::vector<Message>& out) const;
  const fct::FctState& state() const { return ctl_.state(); }

 private:
  struct SNode {
    machine::BlockId block;
    std::vector<Key> pivots;
    std::vector<int> children;  // >=0 node index; <0 -> ~unit position
    std::vector<bpt::Buffer> buffers;
  };

  void build(std::uint64_t fanout);
  void rebuild(std::uint64_t fanout, std::vector<Delivery>& out);
  void flush_node_buffer(std::size_t node, std::size_t j, std::vector<Delivery>& out);

  machine::Machine* m_;
  std::size_t units_;
  std::uint64_t keys_covered_;
  std::vector<Key> unit_his_;
  std::vector<SNode> nodes_;
  int root_ = -1;
  std::uint64_t physical_ = 1;
  std::uint64_t cap_ = 1;
  fct::Controller ctl_;
};

// One micro-supernode: up to three shortcut slots plus segment trees over the
// runs between them. Units are bottom-micro indices (root micro) or port
// positions (bottom micros).
struct Micro {
  machine::BlockId base;
  std::size_t unit_lo = 0, unit_hi = 0;

  struct Slot {
    std::size_t unit;
    machine::BlockId block;
    bpt::Buffer buf;
    bool orphan = false;  // no longer in the active shortcut triple
  };
  std::vector<Slot> slots;
  struct Seg {
    std::size_t unit_lo, unit_hi;
    std::unique_ptr<SegmentFct> fct;
  };
  std::vector<Seg> segs;

  std::uint64_t io_age = 0;       // I/Os since last clobber
  std::uint64_t lifetime_io = 0;  // I/Os since supernode birth
  bool shortcut_changed_in_age = false;
  std::uint64_t clobbers = 0;

  int slot_for(std::size_t unit) const;
  int seg_for(std::size_t unit) const;
};

// Shortcut convergence window state for one supernode.
struct Window {
  int phase = 0;  // 0 = not running (settled, or no candidates yet)
  std::uint64_t budget = 0;
  std::uint64_t current_len = 0;
  std::uint64_t planned_len_sum = 0;  // completed planned lengths
  std::uint64_t window_io = 0;
  int q = -1, r = -1, s = -1;  // port positions, q <= r <= s
  int q_install_phase = 0, s_install_phase = 0;
  bool settled = false;
  std::uint64_t pivots_between = 0;

  std::uint64_t windows_started = 0;
  std::uint64_t crossings = 0;
  std::uint64_t converged = 0;
  std::uint64_t phases_total = 0;
  std::uint64_t max_phases_in_window = 0;
  std::uint64_t split_terminations = 0;
};

struct Supernode {
  KeyRange range;
  int height = 1;  // 1: ports are data leaves
  std::vector<Port> ports;
  std::vector<Key> valid_pivots;  // port-boundary keys at birth
  std::uint64_t birth_size = 0;
  std::uint64_t size_keys = 0;
  std::uint64_t io_clock = 0;
  std::uint64_t rebuild_io_here = 0;
  std::uint64_t lifetimes = 0;

  Micro m0;
  std::vector<Micro> bottoms;
  Window win;

  std::size_t bottom_of_port(std::size_t port) const;
  bool fully_shortcutted(std::size_t port) const;
  std::uint64_t ports_size_keys(std::size_t lo, std::size_t hi) const;
};

struct SupernodeReport {
  int height = 0;
  std::uint64_t size_keys = 0;
  std::uint64_t windows = 0;
  std::uint64_t phases = 0;
  std::uint64_t crossings = 0;
  std::uint64_t converged_windows = 0;
  std::uint64_t split_terminations = 0;
  std::uint64_t io_clock = 0;
  std::uint64_t rebuild_io = 0;
  double converged_micro_fraction = 0.0;
  double never_converged_io_fraction = 0.0;
  double rebuild_fraction = 0.0;
  double reshortcut_ratio = 0.0;  // actual / p-re-shortcutted, best valid p
};

struct RunReport {
  machine::CostLedger ledger;
  std::vector<SupernodeReport> supernodes;
  std::uint64_t queries = 0, writes = 0;
  std::uint64_t leaf_splits = 0, supernode_splits = 0;
  double additive_term = 0.0;  // min(I/B^delta, R*log2(B^delta))
};

struct JelloOps;

class JelloTree {
 public:
  JelloTree(machine::Machine& m, const Config& cfg, std::uint64_t n_hint);
  ~JelloTree();

  void bulk_load(const std::vector<Key>& sorted_keys);
  void execute(const Op& op, std::optional<Word>* answer = nullptr);

  RunReport report(bool with_reshortcut_audit = false) const;
  Supernode* root() { return root_.get(); }
  const Config& config() const { return cfg_; }
  std::uint64_t key_count() const { return present_.size(); }
  machine::Machine& machine() { return *m_; }

  // Exact optimal-shortcut tracking over candidate ports (test hook).
  int opt_shortcut(const Supernode& x) const;
  void validate() const;

  struct Audits {
    std::uint64_t installs = 0;
    std::uint64_t install_age_resets_bad = 0;
    std::uint64_t halving_violations = 0;
    std::uint64_t anchor_retention_violations = 0;
    std::uint64_t phase_bound_violations = 0;
    std::uint64_t window_geometry_violations = 0;
    std::uint64_t shortcut_query_over_2 = 0;
    std::uint64_t max_install_rebuild_io = 0;
  };
  const Audits& audits() const { return audits_; }

 private:
  friend struct JelloOps;

  machine::Machine* m_;
  Config cfg_;
  std::uint64_t n_hint_;
  std::unique_ptr<Supernode> root_;
  std::set<Key> present_;
  std::uint64_t next_seq_ = 1;
  bool loaded_ = false;  // block charges for the initial configuration
  Audits audits_;
  RunReport totals_;

  std::vector<Supernode*> sn_stack_;  // innermost supernode attribution
  std::vector<Micro*> micro_stack_;
  machine::IoListener listener_;
};

RunReport jello_run(const Trace& trace, const Config& cfg, const std::vector<Key>& preload);

// ---------------------------------------------------------------------------
// Fixed-pivot variant: static skeleton over a fixed power-of-two key set,
// each supernode's buffer one fanout-convergent tree, force-restarted every
// B^delta * log2(B^delta) I/Os.
struct FixedPivotReport {
  machine::CostLedger ledger;
  std::uint64_t forced_restarts = 0;
  std::uint64_t supernode_levels = 0;
  std::vector<std::uint64_t> final_fanouts;
};

class FixedPivotTree {
 public:
  FixedPivotTree(machine::Machine& m, const Config& cfg, const std::vector<Key>& keys);
  void execute(const Op& op, std::optional<Word>* answer = nullptr);
  FixedPivotReport report() const;
  std::uint64_t levels() const { return levels_; }

 private:
  struct FpNode {
    KeyRange range;
    std::uint64_t covered_keys = 0;
    std::vector<int> children;  // index into nodes or ~leaf index
    std::vector<Key> child_his;
    std::unique_ptr<SegmentFct> seg;
    std::uint64_t io_clock = 0;
    std::uint64_t restarts = 0;
  };

  void deliver(int node_idx, std::vector<SegmentFct::Delivery>&& ds);
  void deposit_into(int node_idx, const Message& msg);
  void tick_clock(int node_idx, std::uint64_t n);

  machine::Machine* m_;
  Config cfg_;
  std::vector<FpNode> nodes_;
  std::vector<DataLeaf> leaves_;
  int root_ = -1;
  std::uint64_t levels_ = 0;
  std::uint64_t restart_period_ = 1;
  std::uint64_t forced_restarts_ = 0;
  std::set<Key> present_;
  std::uint64_t next_seq_ = 1;
};

FixedPivotReport fixed_pivot_tree_run(const Trace& trace, const Config& cfg,
                                      const std::vector<Key>& keys);

}  // namespace bufprop::jello
