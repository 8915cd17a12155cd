#include "bufprop/jello.hpp"

#include <algorithm>
#include <cmath>

#include "bufprop/check.hpp"

namespace bufprop::jello {

using machine::BlockId;
using machine::IoCategory;
using machine::Payload;

// ---------------------------------------------------------------------------
// Config

namespace {

int delta_exponent(double delta, int log2b) {
  double e = delta * log2b;
  int r = int(std::lround(e));
  if (std::abs(e - double(r)) > 1e-9)
    throw std::invalid_argument("delta * log2(B) must be an integer");
  return r;
}

}  // namespace

std::uint64_t Config::bd() const {
  return 1ULL << delta_exponent(delta, cost::log2_exact(std::uint64_t(b)));
}

std::uint64_t Config::bd2() const {
  int e = delta_exponent(delta, cost::log2_exact(std::uint64_t(b)));
  if (e % 2 != 0) throw std::invalid_argument("delta * log2(B) must be even for B^{delta/2}");
  return 1ULL << (e / 2);
}

std::uint64_t Config::min_phase_len() const {
  std::uint64_t f = bd2();
  return std::uint64_t(c_phase) * f * std::uint64_t(cost::log2_exact(f));
}

std::uint64_t Config::cache_threshold(std::uint64_t n) const {
  if (cache_c <= 0.0) return machine::Cache::NEVER;
  double divisor = cache_c;
  if (cache_augmented) divisor *= std::pow(double(b), 3.0 * delta);
  double t = double(n) / divisor;
  if (t >= double(machine::Cache::NEVER)) return machine::Cache::NEVER;
  return std::max<std::uint64_t>(1, std::uint64_t(t));
}

void Config::validate(std::uint64_t n) const {
  if (!cost::is_pow2(std::uint64_t(b))) throw std::invalid_argument("B must be a power of two");
  if (delta <= 0.0 || delta >= 1.0) throw std::invalid_argument("delta must lie in (0,1)");
  if (bd2() < 4) throw std::invalid_argument("B^{delta/2} must be at least 4");
  double log2n = std::log2(double(std::max<std::uint64_t>(2, n)));
  if (double(b) < log2n) throw std::invalid_argument("B must be at least log2(N)");
  if (c_phase < 1) throw std::invalid_argument("phase constant must be >= 1");
  if (rho_upper <= 0.0 || rho_upper > 1.0)
    throw std::invalid_argument("rho must lie in (0, 1]");
}

cost::Scaled ell_split_cost_scaled(std::uint64_t b, std::uint64_t lambda_left,
                                   std::uint64_t r_left, std::uint64_t w_left,
                                   std::uint64_t lambda_right, std::uint64_t r_right,
                                   std::uint64_t w_right, std::uint64_t r_ell,
                                   std::uint64_t w_ell) {
  cost::Scaled total = 0;
  if (lambda_left > 0) {
    total += cost::best_fanout(b, lambda_left, r_left, w_left).cost_scaled;
  } else {
    check(r_left == 0 && w_left == 0, "ops recorded on an empty left side");
  }
  if (lambda_right > 0) {
    total += cost::best_fanout(b, lambda_right, r_right, w_right).cost_scaled;
  } else {
    check(r_right == 0 && w_right == 0, "ops recorded on an empty right side");
  }
  total += cost::Scaled(b) * cost::Scaled(r_ell) + 2 * cost::Scaled(w_ell);
  return total;
}

// ---------------------------------------------------------------------------
// SegmentFct

SegmentFct::SegmentFct(machine::Machine& m, std::vector<Key> unit_his,
                       std::uint64_t keys_covered)
    : m_(&m),
      units_(unit_his.size() + 1),
      keys_covered_(keys_covered),
      unit_his_(std::move(unit_his)),
      ctl_(std::uint64_t(m.B())) {
  ctl_.start_epoch(units_, keys_covered_);
  build(std::uint64_t(m.B()));
}

void SegmentFct::build(std::uint64_t fanout) {
  nodes_.clear();
  physical_ = units_ == 1 ? 1 : std::min<std::uint64_t>(fanout, std::uint64_t(m_->B()));
  cap_ = std::max<std::uint64_t>(1, std::uint64_t(m_->B()) / std::max<std::uint64_t>(1, physical_));

  if (units_ == 1) {
    SNode n;
    n.block = m_->store.allocate(Payload{});
    n.children = {~0};
    n.buffers.resize(1);
    nodes_.push_back(std::move(n));
    root_ = 0;
    return;
  }
  struct Item {
    int id;
    Key hi;
  };
  std::vector<Item> level;
  for (std::size_t u = 0; u < units_; ++u)
    level.push_back({~int(u), u + 1 < units_ ? unit_his_[u] : Key{0}});
  while (true) {
    bool root_level = level.size() <= physical_;
    std::size_t n = level.size();
    std::size_t groups = root_level ? 1 : (n + physical_ - 1) / physical_;
    std::vector<std::size_t> sizes(groups, n / groups);
    for (std::size_t i = 0; i < n % groups; ++i) sizes[i]++;
    std::vector<Item> next;
    std::size_t at = 0;
    for (std::size_t g = 0; g < groups; ++g) {
      SNode node;
      node.block = m_->store.allocate(Payload{});
      for (std::size_t i = 0; i < sizes[g]; ++i) {
        node.children.push_back(level[at + i].id);
        if (i + 1 < sizes[g]) node.pivots.push_back(level[at + i].hi);
      }
      node.buffers.resize(sizes[g]);
      int id = int(nodes_.size());
      Item item{id, level[at + sizes[g] - 1].hi};
      at += sizes[g];
      nodes_.push_back(std::move(node));
      next.push_back(item);
    }
    if (root_level) {
      root_ = next.front().id;
      break;
    }
    level = std::move(next);
  }
}

std::uint64_t SegmentFct::buffered() const {
  std::uint64_t n = 0;
  for (const SNode& node : nodes_)
    for (const bpt::Buffer& b : node.buffers) n += b.size();
  return n;
}

void SegmentFct::collect_messages(std::vector<Message>& out) const {
  for (const SNode& node : nodes_)
    for (const bpt::Buffer& b : node.buffers)
      for (const auto& [k, msg] : b.msgs) out.push_back(msg);
}

void SegmentFct::release_blocks() {
  for (SNode& node : nodes_) {
    m_->cache.forget(node.block);
    m_->store.deallocate(node.block);
  }
  nodes_.clear();
  root_ = -1;
}

void SegmentFct::take_all(std::vector<Delivery>& out) {
  std::map<std::size_t, std::vector<Message>> by_unit;
  for (SNode& node : nodes_) {
    for (std::size_t j = 0; j < node.buffers.size(); ++j) {
      if (node.buffers[j].empty()) continue;
      for (auto& [k, msg] : node.buffers[j].msgs) {
        int id = node.children[j];
        while (id >= 0) {
          SNode& deeper = nodes_[id];
          id = deeper.children[bpt::route_index(deeper.pivots, k)];
        }
        by_unit[std::size_t(~id)].push_back(msg);
      }
      node.buffers[j] = bpt::Buffer{};
    }
  }
  for (auto& [unit, msgs] : by_unit) {
    std::sort(msgs.begin(), msgs.end(),
              [](const Message& a, const Message& b) { return a.seq < b.seq; });
    Delivery d;
    d.unit = unit;
    d.batches = bpt::flush_batches(msgs.size(), std::uint64_t(m_->B()));
    d.msgs = std::move(msgs);
    out.push_back(std::move(d));
  }
}

void SegmentFct::rebuild(std::uint64_t fanout, std::vector<Delivery>& out) {
  std::vector<Message> pending;
  for (SNode& node : nodes_)
    for (bpt::Buffer& b : node.buffers)
      for (auto& [k, msg] : b.msgs) pending.push_back(msg);
  release_blocks();
  build(fanout);
  m_->store.charge(IoCategory::Rebuild, nodes_.size());
  std::sort(pending.begin(), pending.end(),
            [](const Message& a, const Message& b) { return a.seq < b.seq; });
  SNode& root = nodes_[root_];
  for (const Message& msg : pending) root.buffers[bpt::route_index(root.pivots, msg.key)].add(msg);
  for (std::size_t j = 0; j < root.buffers.size(); ++j)
    if (root.buffers[j].size() > cap_) flush_node_buffer(std::size_t(root_), j, out);
}

void SegmentFct::flush_node_buffer(std::size_t node_idx, std::size_t j,
                                   std::vector<Delivery>& out) {
  SNode& node = nodes_[node_idx];
  bpt::Buffer buf = std::move(node.buffers[j]);
  node.buffers[j] = bpt::Buffer{};
  if (buf.empty()) return;
  std::uint64_t batches = bpt::flush_batches(buf.size(), cap_);
  int child = node.children[j];
  if (child < 0) {
    // Bottom hop: the owner charges 2 I/Os per batch against the unit it
    // routes this delivery into.
    Delivery d;
    d.unit = std::size_t(~child);
    d.batches = batches;
    for (auto& [k, msg] : buf.msgs) d.msgs.push_back(msg);
    out.push_back(std::move(d));
    return;
  }
  SNode& c = nodes_[child];
  m_->cache.note_node_size(c.block, keys_covered_);
  for (std::uint64_t bi = 0; bi < batches; ++bi) {
    machine::read_block(m_->store, m_->cache, c.block, IoCategory::Flush);
    machine::write_block(m_->store, m_->cache, c.block, Payload{}, IoCategory::Flush);
  }
  for (auto& [k, msg] : buf.msgs) c.buffers[bpt::route_index(c.pivots, k)].add(msg);
  for (std::size_t jj = 0; jj < c.buffers.size(); ++jj)
    if (c.buffers[jj].size() > cap_) flush_node_buffer(std::size_t(child), jj, out);
}

void SegmentFct::deposit(const Message& msg, std::vector<Delivery>& out) {
  SNode& root = nodes_[root_];
  int j = bpt::route_index(root.pivots, msg.key);
  root.buffers[j].add(msg);
  if (root.buffers[j].size() > cap_) flush_node_buffer(std::size_t(root_), j, out);
}

const Message* SegmentFct::query_path(Key key, std::size_t unit) {
  int id = root_;
  const Message* best = nullptr;
  while (id >= 0) {
    SNode& n = nodes_[id];
    m_->cache.note_node_size(n.block, keys_covered_);
    machine::read_block(m_->store, m_->cache, n.block, IoCategory::Search);
    int j = bpt::route_index(n.pivots, key);
    if (const Message* msg = n.buffers[j].find(key)) {
      best = msg;  // newest on the path; deeper copies are older
      break;
    }
    id = n.children[j];
  }
  if (!best && id < 0) check(std::size_t(~id) == unit, "segment query reached the wrong unit");
  return best;
}

void SegmentFct::after_op(OpKind kind, std::vector<Delivery>& out) {
  fct::Controller::Decision d = ctl_.after_op(kind);
  if (d.restart) {
    std::uint64_t target = std::uint64_t(m_->B());
    if (units_ > 1 && physical_ != target) {
      rebuild(target, out);
      ctl_.note_rebuilt(target, nodes_.size());
    }
    ctl_.start_epoch(units_, keys_covered_);
  } else if (d.rebuild_to != 0 && d.rebuild_to != physical_ && units_ > 1) {
    rebuild(d.rebuild_to, out);
    ctl_.note_rebuilt(d.rebuild_to, nodes_.size());
  }
}

void SegmentFct::force_restart(std::vector<Delivery>& out) {
  std::uint64_t target = std::uint64_t(m_->B());
  if (units_ > 1 && physical_ != target) {
    rebuild(target, out);
    ctl_.note_rebuilt(target, nodes_.size());
  }
  ctl_.start_epoch(units_, keys_covered_);
}

void SegmentFct::split_unit(std::size_t pos, Key pivot) {
  for (SNode& n : nodes_)
    for (int& c : n.children)
      if (c < 0 && std::size_t(~c) > pos) c = ~int(std::size_t(~c) + 1);
  // Find the bottom node owning `pos`.
  int owner = -1, slot = -1;
  std::function<bool(int)> find = [&](int nid) {
    SNode& n = nodes_[nid];
    for (std::size_t j = 0; j < n.children.size(); ++j) {
      int c = n.children[j];
      if (c < 0) {
        if (std::size_t(~c) == pos) {
          owner = nid;
          slot = int(j);
          return true;
        }
      } else if (find(c)) {
        return true;
      }
    }
    return false;
  };
  find(root_);
  check(owner >= 0, "segment split: unit not found");
  SNode& n = nodes_[owner];
  n.pivots.insert(n.pivots.begin() + slot, pivot);
  n.children.insert(n.children.begin() + slot + 1, ~int(pos + 1));
  bpt::Buffer old = std::move(n.buffers[slot]);
  bpt::Buffer left, right;
  for (auto& [k, msg] : old.msgs) (k <= pivot ? left : right).add(msg);
  n.buffers[slot] = std::move(left);
  n.buffers.insert(n.buffers.begin() + slot + 1, std::move(right));
  unit_his_.insert(unit_his_.begin() + pos, pivot);
  units_++;
}

// ---------------------------------------------------------------------------
// Port / Micro / Supernode accessors

KeyRange Port::range() const { return leaf ? leaf->range : sub->range; }
std::uint64_t Port::size_keys() const { return leaf ? leaf->size_keys : sub->size_keys; }

int Micro::slot_for(std::size_t unit) const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].unit == unit) return int(i);
  return -1;
}

int Micro::seg_for(std::size_t unit) const {
  for (std::size_t i = 0; i < segs.size(); ++i)
    if (unit >= segs[i].unit_lo && unit < segs[i].unit_hi) return int(i);
  return -1;
}

std::size_t Supernode::bottom_of_port(std::size_t port) const {
  for (std::size_t j = 0; j < bottoms.size(); ++j)
    if (port >= bottoms[j].unit_lo && port < bottoms[j].unit_hi) return j;
  check(false, "port not covered by any bottom micro");
  return 0;
}

bool Supernode::fully_shortcutted(std::size_t port) const {
  std::size_t j = bottom_of_port(port);
  int local = bottoms[j].slot_for(port);
  if (local < 0 || bottoms[j].slots[local].orphan) return false;
  int upper = m0.slot_for(j);
  return upper >= 0 && !m0.slots[upper].orphan;
}

std::uint64_t Supernode::ports_size_keys(std::size_t lo, std::size_t hi) const {
  std::uint64_t n = 0;
  for (std::size_t i = lo; i < hi; ++i) n += ports[i].size_keys();
  return n;
}

// ---------------------------------------------------------------------------
// JelloOps

struct JelloOps {
  JelloTree& t;
  machine::Machine& m;
  const Config& cfg;

  explicit JelloOps(JelloTree& tree) : t(tree), m(*tree.m_), cfg(tree.cfg_) {}

  std::uint64_t B() const { return std::uint64_t(m.B()); }

  struct SnScope {
    JelloTree& t;
    SnScope(JelloTree& tt, Supernode* x) : t(tt) { t.sn_stack_.push_back(x); }
    ~SnScope() { t.sn_stack_.pop_back(); }
  };
  struct MicroScope {
    JelloTree& t;
    MicroScope(JelloTree& tt, Micro* mm) : t(tt) { t.micro_stack_.push_back(mm); }
    ~MicroScope() { t.micro_stack_.pop_back(); }
  };

  static std::vector<std::size_t> even_groups(std::size_t n, std::size_t max_per) {
    std::size_t g = (n + max_per - 1) / max_per;
    std::vector<std::size_t> sizes(g, n / g);
    for (std::size_t i = 0; i < n % g; ++i) sizes[i]++;
    return sizes;
  }

  void touch_read(BlockId id, std::uint64_t range_keys, IoCategory cat) {
    m.cache.note_node_size(id, range_keys);
    machine::read_block(m.store, m.cache, id, cat);
  }
  void touch_write(BlockId id, std::uint64_t range_keys, IoCategory cat) {
    m.cache.note_node_size(id, range_keys);
    machine::write_block(m.store, m.cache, id, Payload{}, cat);
  }

  std::uint64_t unit_keys(const Supernode& x, const Micro& mi, std::size_t u) const {
    if (&mi == &x.m0) {
      const Micro& bm = x.bottoms[u];
      return x.ports_size_keys(bm.unit_lo, bm.unit_hi);
    }
    return x.ports[u].size_keys();
  }

  Key unit_hi_key(const Supernode& x, const Micro& mi, std::size_t u) const {
    if (&mi == &x.m0) return x.ports[x.bottoms[u].unit_hi - 1].range().hi;
    return x.ports[u].range().hi;
  }

  // Representative ingress block for the structure below a unit (for
  // pin-aware delivery-hop charging).
  BlockId unit_block(const Supernode& x, const Micro& mi, std::size_t u) const {
    if (&mi == &x.m0) return x.bottoms[u].base;
    const Port& p = x.ports[u];
    return p.is_leaf() ? p.leaf->block : p.sub->m0.base;
  }

  void charge_hop(Supernode& x, Micro& mi, std::size_t unit, std::uint64_t batches) {
    BlockId id = unit_block(x, mi, unit);
    std::uint64_t keys = unit_keys(x, mi, unit);
    for (std::uint64_t i = 0; i < batches; ++i) {
      touch_read(id, keys, IoCategory::Flush);
      touch_write(id, keys, IoCategory::Flush);
    }
  }

  // ------------------------------------------------------------- structure
  // Builds the slot/segment partition of a micro for the given slotted units;
  // charges and returns the fresh block count (uncharged during the load).
  std::uint64_t build_micro_partition(Supernode& x, Micro& mi,
                                      const std::set<std::size_t>& slotted) {
    std::uint64_t blocks = 1;  // base block
    mi.slots.clear();
    mi.segs.clear();
    std::size_t run_start = mi.unit_lo;
    auto close_run = [&](std::size_t end) {
      if (end <= run_start) return;
      Micro::Seg seg;
      seg.unit_lo = run_start;
      seg.unit_hi = end;
      std::uint64_t keys = 0;
      for (std::size_t u = run_start; u < end; ++u) keys += unit_keys(x, mi, u);
      std::vector<Key> his;
      for (std::size_t u = run_start; u + 1 < end; ++u) his.push_back(unit_hi_key(x, mi, u));
      seg.fct = std::make_unique<SegmentFct>(m, std::move(his), keys);
      blocks += seg.fct->node_count();
      mi.segs.push_back(std::move(seg));
    };
    for (std::size_t u = mi.unit_lo; u < mi.unit_hi; ++u) {
      if (slotted.count(u)) {
        close_run(u);
        Micro::Slot s;
        s.unit = u;
        s.block = m.store.allocate(Payload{});
        mi.slots.push_back(std::move(s));
        blocks += 1;
        run_start = u + 1;
      }
    }
    close_run(mi.unit_hi);
    if (t.loaded_) {
      m.store.charge(IoCategory::Rebuild, blocks);
      x.rebuild_io_here += blocks;
    }
    return blocks;
  }

  void discard_micro_structures(Micro& mi) {
    for (Micro::Slot& s : mi.slots) {
      check(s.buf.empty(), "discarding a slot with buffered messages");
      m.cache.forget(s.block);
      m.store.deallocate(s.block);
    }
    for (Micro::Seg& seg : mi.segs) {
      check(seg.fct->buffered() == 0, "discarding a segment with buffered messages");
      seg.fct->release_blocks();
    }
    mi.slots.clear();
    mi.segs.clear();
  }

  // Clobber: push every buffered message one level down, rebuild the
  // partition, reset the convergence clock. Returns the blocks written for
  // the fresh structure (the rebuild charge proper; downstream flush repair
  // is charged as flush work where it happens).
  std::uint64_t clobber_micro(Supernode& x, Micro& mi, const std::set<std::size_t>& slotted) {
    MicroScope scope(t, &mi);
    for (Micro::Slot& s : mi.slots)
      if (!s.buf.empty()) flush_slot(x, mi, s);
    for (Micro::Seg& seg : mi.segs) {
      std::vector<SegmentFct::Delivery> out;
      seg.fct->take_all(out);
      route_deliveries(x, mi, seg.unit_lo, std::move(out));
    }
    discard_micro_structures(mi);
    std::uint64_t blocks = build_micro_partition(x, mi, slotted);
    mi.io_age = 0;
    mi.shortcut_changed_in_age = false;
    mi.clobbers++;
    return blocks;
  }

  // ---------------------------------------------------------------- message
  void route_deliveries(Supernode& x, Micro& mi, std::size_t seg_lo,
                        std::vector<SegmentFct::Delivery>&& ds) {
    for (auto& d : ds) {
      std::size_t unit = seg_lo + d.unit;
      charge_hop(x, mi, unit, d.batches);
      deliver_to_unit(x, mi, unit, std::move(d.msgs));
    }
  }

  void deliver_to_unit(Supernode& x, Micro& mi, std::size_t u, std::vector<Message> msgs) {
    if (&mi == &x.m0)
      deposit_into_bottom(x, x.bottoms[u], std::move(msgs));
    else
      deliver_to_port(x, u, std::move(msgs));
  }

  void flush_slot(Supernode& x, Micro& mi, Micro::Slot& s) {
    if (s.buf.empty()) return;
    std::uint64_t batches = bpt::flush_batches(s.buf.size(), B());
    std::vector<Message> msgs;
    for (auto& [k, msg] : s.buf.msgs) msgs.push_back(msg);
    std::sort(msgs.begin(), msgs.end(),
              [](const Message& a, const Message& b) { return a.seq < b.seq; });
    s.buf = bpt::Buffer{};
    charge_hop(x, mi, s.unit, batches);
    deliver_to_unit(x, mi, s.unit, std::move(msgs));
  }

  void deposit_into_bottom(Supernode& x, Micro& bm, std::vector<Message> msgs) {
    MicroScope scope(t, &bm);
    for (Message& msg : msgs) {
      std::size_t port = route_port(x, msg.key);
      check(port >= bm.unit_lo && port < bm.unit_hi, "message crossed micro boundaries");
      int si = bm.slot_for(port);
      if (si >= 0) {
        bm.slots[si].buf.add(msg);
        if (bm.slots[si].buf.size() > B()) flush_slot(x, bm, bm.slots[si]);
        continue;
      }
      int gi = bm.seg_for(port);
      check(gi >= 0, "port neither slotted nor in a segment");
      Micro::Seg& seg = bm.segs[gi];
      std::vector<SegmentFct::Delivery> out;
      seg.fct->deposit(msg, out);
      seg.fct->after_op(OpKind::Insert, out);
      route_deliveries(x, bm, seg.unit_lo, std::move(out));
    }
  }

  void deliver_to_port(Supernode& x, std::size_t p, std::vector<Message> msgs) {
    Port& port = x.ports[p];
    if (port.is_leaf()) {
      for (Message& msg : msgs) {
        check(port.leaf->range.contains(msg.key), "message delivered to the wrong leaf");
        port.leaf->data[msg.key] = msg.val;
      }
      return;
    }
    ingress(*port.sub, std::move(msgs));
  }

  std::size_t route_port(const Supernode& x, Key k) const {
    std::size_t lo = 0, hi = x.ports.size() - 1;
    while (lo < hi) {
      std::size_t mid = (lo + hi) / 2;
      if (k <= x.ports[mid].range().hi)
        hi = mid;
      else
        lo = mid + 1;
    }
    return lo;
  }

  // Messages entering supernode x. Deposits into the top structures are
  // free; hops below charge. Write counters tick at arrival.
  void ingress(Supernode& x, std::vector<Message> msgs) {
    SnScope scope(t, &x);
    // A null micro scope: work in this supernode must not age the caller's
    // micro when ingress is reached through a parent's flush.
    MicroScope barrier(t, nullptr);
    for (Message& msg : msgs) {
      std::size_t p = route_port(x, msg.key);
      x.ports[p].win_w++;
      x.ports[p].life_w++;
      std::size_t j = x.bottom_of_port(p);
      Micro& bm = x.bottoms[j];
      if (x.fully_shortcutted(p)) {
        int si = bm.slot_for(p);
        bm.slots[si].buf.add(msg);
        if (bm.slots[si].buf.size() > B()) {
          MicroScope ms(t, &bm);
          flush_slot(x, bm, bm.slots[si]);
        }
        continue;
      }
      int m0_slot = x.m0.slot_for(j);
      if (m0_slot >= 0) {
        Micro::Slot& s = x.m0.slots[m0_slot];
        s.buf.add(msg);
        if (s.buf.size() > B()) {
          MicroScope ms(t, &x.m0);
          flush_slot(x, x.m0, s);
        }
        continue;
      }
      int gi = x.m0.seg_for(j);
      check(gi >= 0, "bottom micro neither slotted nor in a segment");
      MicroScope ms(t, &x.m0);
      Micro::Seg& seg = x.m0.segs[gi];
      std::vector<SegmentFct::Delivery> out;
      seg.fct->deposit(msg, out);
      seg.fct->after_op(OpKind::Insert, out);
      route_deliveries(x, x.m0, seg.unit_lo, std::move(out));
    }
    // Track the optimal shortcut once per arrival batch (one I/O time step).
    window_track(x);
    settle_phases(x);
  }

  // A buffered answer copied out of the structures; message pointers must not
  // outlive segment rebuilds or micro clobbers.
  struct Hit {
    bool found = false;
    Word val = 0;
    std::uint64_t seq = 0;
  };

  // ------------------------------------------------------------------ query
  std::optional<Word> query(Key k) {
    Supernode* x = t.root_.get();
    while (true) {
      SnScope scope(t, x);
      std::size_t p = route_port(*x, k);
      x->ports[p].win_r++;
      x->ports[p].life_r++;
      std::uint64_t before = x->io_clock;
      bool shortcut = x->fully_shortcutted(p);

      Hit found = query_within(*x, k, p);
      if (shortcut && x->io_clock - before > 2) t.audits_.shortcut_query_over_2++;
      window_track(*x);
      settle_phases(*x);
      if (found.found) return found.val;

      Port& port = x->ports[p];
      if (port.is_leaf()) {
        touch_read(port.leaf->block, port.leaf->size_keys, IoCategory::Search);
        auto it = port.leaf->data.find(k);
        return it == port.leaf->data.end() ? std::nullopt : std::optional<Word>(it->second);
      }
      x = port.sub.get();
    }
  }

  // Consult x's internal buffers for key k headed to port p, newest first.
  Hit query_within(Supernode& x, Key k, std::size_t p) {
    std::size_t j = x.bottom_of_port(p);
    Micro& bm = x.bottoms[j];
    if (x.fully_shortcutted(p)) {
      // All of x's messages for this leaf live in its slot block.
      MicroScope ms(t, &bm);
      int si = bm.slot_for(p);
      touch_read(bm.slots[si].block, x.ports[p].size_keys(), IoCategory::Search);
      const Message* msg = bm.slots[si].buf.find(k);
      return msg ? Hit{true, msg->val, msg->seq} : Hit{};
    }
    Hit best;
    auto consider = [&](const Message* msg) {
      if (msg && (!best.found || msg->seq > best.seq)) best = {true, msg->val, msg->seq};
    };
    {
      // The selection counters ride the root-region block this query touches
      // anyway (slot block or segment node), so tracking charges nothing
      // extra; the base block holds routing metadata only.
      MicroScope ms(t, &x.m0);
      int m0_slot = x.m0.slot_for(j);
      if (m0_slot >= 0) {
        Micro::Slot& s = x.m0.slots[m0_slot];
        touch_read(s.block, unit_keys(x, x.m0, j), IoCategory::Search);
        consider(s.buf.find(k));
      } else {
        int gi = x.m0.seg_for(j);
        check(gi >= 0, "query: bottom micro unassigned in the root micro");
        Micro::Seg& seg = x.m0.segs[gi];
        consider(seg.fct->query_path(k, j - seg.unit_lo));
        std::vector<SegmentFct::Delivery> out;
        seg.fct->after_op(OpKind::Query, out);
        route_deliveries(x, x.m0, seg.unit_lo, std::move(out));
      }
    }
    MicroScope ms(t, &bm);
    int si = bm.slot_for(p);
    if (si >= 0) {
      touch_read(bm.slots[si].block, x.ports[p].size_keys(), IoCategory::Search);
      consider(bm.slots[si].buf.find(k));
    } else {
      int gi = bm.seg_for(p);
      check(gi >= 0, "query: port unassigned in its bottom micro");
      Micro::Seg& seg = bm.segs[gi];
      consider(seg.fct->query_path(k, p - seg.unit_lo));
      std::vector<SegmentFct::Delivery> out;
      seg.fct->after_op(OpKind::Query, out);
      route_deliveries(x, bm, seg.unit_lo, std::move(out));
    }
    return best;
  }

  // ----------------------------------------------------------------- window
  int opt_shortcut(const Supernode& x) const {
    std::size_t n = x.ports.size();
    if (n == 0) return -1;
    std::vector<std::uint64_t> pr(n + 1, 0), pw(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
      pr[i + 1] = pr[i] + x.ports[i].win_r;
      pw[i + 1] = pw[i] + x.ports[i].win_w;
    }
    int best = -1;
    cost::Scaled best_cost = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!port_has_valid_pivot(x, i)) continue;
      cost::Scaled c = ell_split_cost_scaled(B(), i, pr[i], pw[i], n - i - 1,
                                             pr[n] - pr[i + 1], pw[n] - pw[i + 1],
                                             x.ports[i].win_r, x.ports[i].win_w);
      if (best < 0 || c < best_cost) {  // ties to the leftmost
        best = int(i);
        best_cost = c;
      }
    }
    return best;
  }

  bool port_has_valid_pivot(const Supernode& x, std::size_t i) const {
    KeyRange r = x.ports[i].range();
    auto it = std::upper_bound(x.valid_pivots.begin(), x.valid_pivots.end(), r.lo);
    return it != x.valid_pivots.end() && *it <= r.hi;
  }

  std::uint64_t pivots_strictly_between(const Supernode& x, int a, int b) const {
    std::uint64_t cnt = 0;
    for (int i = a + 1; i < b; ++i) {
      KeyRange r = x.ports[i].range();
      auto lo = std::upper_bound(x.valid_pivots.begin(), x.valid_pivots.end(), r.lo);
      auto hi = std::upper_bound(x.valid_pivots.begin(), x.valid_pivots.end(), r.hi);
      cnt += std::uint64_t(hi - lo);
    }
    return cnt;
  }

  int median_pivot_port(const Supernode& x, int a, int b) const {
    std::vector<int> holders;  // port per valid pivot option, in key order
    for (int i = a + 1; i < b; ++i) {
      KeyRange r = x.ports[i].range();
      auto lo = std::upper_bound(x.valid_pivots.begin(), x.valid_pivots.end(), r.lo);
      auto hi = std::upper_bound(x.valid_pivots.begin(), x.valid_pivots.end(), r.hi);
      for (auto it = lo; it != hi; ++it) holders.push_back(i);
    }
    if (holders.empty()) return -1;
    return holders[(holders.size() + 1) / 2 - 1];  // left-biased median
  }

  // Install the shortcut for port p so the current triple is fully
  // shortcutted. No-op when installed. When the slot blocks from an earlier
  // window still exist (orphaned, never clobbered away), they are reactivated
  // in place: in-flight messages for p migrate from the root-level slot into
  // p's slot and no micro is rebuilt. Otherwise the root micro and p's bottom
  // micro are clobbered and rebuilt, exactly two.
  void rebuild_shortcuts(Supernode& x, int p) {
    if (p < 0) return;
    if (x.fully_shortcutted(std::size_t(p))) return;

    std::set<std::size_t> triple;
    for (int member : {x.win.q, x.win.r, x.win.s})
      if (member >= 0) triple.insert(std::size_t(member));
    triple.insert(std::size_t(p));
    std::size_t j = x.bottom_of_port(std::size_t(p));
    Micro& bm = x.bottoms[j];

    int local = bm.slot_for(std::size_t(p));
    int upper = x.m0.slot_for(j);
    if (local >= 0 && upper >= 0) {
      // Reactivation: structures are already in place. Move p's pending
      // messages out of the root-level slot so the slot again holds all of
      // x's messages for this leaf.
      Micro::Slot& up = x.m0.slots[upper];
      Micro::Slot& lo = bm.slots[local];
      bool moved = false;
      for (auto it = up.buf.msgs.begin(); it != up.buf.msgs.end();) {
        if (route_port(x, it->first) == std::size_t(p)) {
          lo.buf.add(it->second);
          it = up.buf.msgs.erase(it);
          moved = true;
        } else {
          ++it;
        }
      }
      if (moved) {
        MicroScope ms(t, &bm);
        touch_read(up.block, unit_keys(x, x.m0, j), IoCategory::Rebuild);
        touch_write(lo.block, x.ports[p].size_keys(), IoCategory::Rebuild);
      }
      up.orphan = false;
      lo.orphan = false;
      refresh_orphans(x, triple);
      if (lo.buf.size() > B()) {
        MicroScope ms(t, &bm);
        flush_slot(x, bm, lo);
      }
      return;
    }

    t.audits_.installs++;
    std::set<std::size_t> m0_slots;
    for (std::size_t port : triple) m0_slots.insert(x.bottom_of_port(port));
    std::set<std::size_t> bj_slots;
    for (std::size_t port : triple)
      if (x.bottom_of_port(port) == j) bj_slots.insert(port);
    std::uint64_t resets = 0;
    std::uint64_t rebuilt = clobber_micro(x, x.m0, m0_slots);
    ++resets;
    rebuilt += clobber_micro(x, x.bottoms[j], bj_slots);
    ++resets;
    refresh_orphans(x, triple);
    if (resets != 2) t.audits_.install_age_resets_bad++;
    t.audits_.max_install_rebuild_io = std::max(t.audits_.max_install_rebuild_io, rebuilt);
  }

  void refresh_orphans(Supernode& x, const std::set<std::size_t>& triple) {
    std::set<std::size_t> m0_slots;
    for (std::size_t port : triple) m0_slots.insert(x.bottom_of_port(port));
    for (Micro::Slot& s : x.m0.slots) s.orphan = !m0_slots.count(s.unit);
    for (Micro& bm : x.bottoms)
      for (Micro::Slot& s : bm.slots) s.orphan = !triple.count(s.unit);
  }

  void start_fresh_window(Supernode& x, bool crossing) {
    Window& w = x.win;
    if (crossing) w.crossings++;
    w.windows_started++;
    w.phase = 0;
    w.budget = 0;
    w.current_len = 0;
    w.planned_len_sum = 0;
    w.window_io = 0;
    w.settled = false;
    for (Port& p : x.ports) {
      p.win_r = 0;
      p.win_w = 0;
    }
    int q = -1, s = -1;
    for (std::size_t i = 0; i < x.ports.size(); ++i)
      if (port_has_valid_pivot(x, i)) {
        if (q < 0) q = int(i);
        s = int(i);
      }
    w.q = q;
    w.s = s;
    w.r = -1;
    if (q < 0) {
      w.settled = true;  // no candidates this lifetime
      return;
    }
    rebuild_shortcuts(x, q);
    if (s != q) rebuild_shortcuts(x, s);
    w.q_install_phase = 1;
    w.s_install_phase = 1;
    int r = median_pivot_port(x, q, s);
    if (r < 0) {
      w.settled = true;  // anchors already adjacent: converged at birth
      w.converged++;
      return;
    }
    w.r = r;
    rebuild_shortcuts(x, r);
    w.phase = 1;
    w.phases_total++;
    w.max_phases_in_window = std::max<std::uint64_t>(w.max_phases_in_window, 1);
    w.pivots_between = pivots_strictly_between(x, w.q, w.s);
    w.current_len = cfg.min_phase_len();
    w.budget = w.current_len;
  }

  // Recompute the tracked optimum; a strict crossing of an anchor terminates
  // the window and starts a fresh one.
  void window_track(Supernode& x) {
    Window& w = x.win;
    if (w.q < 0) {
      if (!w.settled) start_fresh_window(x, false);
      return;
    }
    int opt = opt_shortcut(x);
    if (opt < 0) return;
    if (opt < w.q || opt > w.s) {
      // Retention holds for windows terminated mid-phase: both anchors were
      // shortcutted throughout the penultimate phase. Settled windows keep
      // their anchors installed indefinitely, so the phase arithmetic does
      // not apply there.
      if (!w.settled && w.phase >= 2 &&
          (w.q_install_phase > w.phase - 1 || w.s_install_phase > w.phase - 1))
        t.audits_.anchor_retention_violations++;
      start_fresh_window(x, true);
    }
  }

  void settle_phases(Supernode& x) {
    // Phase boundaries resolve at operation granularity.
    int guard = 0;
    while (x.win.phase >= 1 && !x.win.settled && x.win.budget == 0) {
      advance_phase(x);
      check(++guard < 4096, "phase advancement failed to make progress");
    }
  }

  void advance_phase(Supernode& x) {
    Window& w = x.win;
    check(w.phase >= 1 && !w.settled, "advance_phase without a running phase");
    int opt = opt_shortcut(x);
    if (opt >= 0)
      check(opt >= w.q && opt <= w.s, "tracked optimum within anchors at the boundary");

    std::uint64_t before_between = w.pivots_between;
    int r_install = w.phase;  // r has been shortcutted since this phase began
    // On the boundary tie (opt == r) keep {r, s}: l-split ties break to the
    // leftmost leaf, so the optimum's tie class extends rightward and the
    // bracket must keep covering it.
    if (opt >= 0 && opt >= w.r) {
      w.q = w.r;
      w.q_install_phase = r_install;
    } else {
      w.s = w.r;
      w.s_install_phase = r_install;
    }
    w.planned_len_sum += w.current_len;

    int r = median_pivot_port(x, w.q, w.s);
    if (r < 0) {
      w.settled = true;
      w.converged++;
      w.r = -1;
      return;
    }
    w.r = r;
    w.phase++;
    w.phases_total++;
    w.max_phases_in_window = std::max<std::uint64_t>(w.max_phases_in_window, w.phase);

    std::uint64_t between = pivots_strictly_between(x, w.q, w.s);
    if (between > (before_between + 1) / 2) t.audits_.halving_violations++;
    w.pivots_between = between;
    std::uint64_t vp = std::max<std::uint64_t>(2, x.valid_pivots.size());
    if (std::uint64_t(w.phase) > std::uint64_t(cost::ceil_log(2, vp)) + 2)
      t.audits_.phase_bound_violations++;

    double rho = x.height == 1 ? cfg.rho_bottom() : cfg.rho_upper;
    w.current_len = std::max<std::uint64_t>(
        1, std::uint64_t(std::ceil(rho * double(w.planned_len_sum))));
    w.budget = w.current_len;
    double geo = double(cfg.min_phase_len()) * std::pow(1.0 + rho, double(w.phase));
    if (double(w.planned_len_sum + w.current_len) > geo + double(w.phase) + 1e-6)
      t.audits_.window_geometry_violations++;
    rebuild_shortcuts(x, r);
  }

  // ------------------------------------------------------------ size/splits
  void note_new_key(Key k) {
    t.present_.insert(k);
    std::vector<Supernode*> path;
    Supernode* x = t.root_.get();
    DataLeaf* leaf = nullptr;
    std::size_t leaf_port = 0;
    while (true) {
      path.push_back(x);
      x->size_keys++;
      std::size_t p = route_port(*x, k);
      Port& port = x->ports[p];
      if (port.is_leaf()) {
        leaf = port.leaf.get();
        leaf_port = p;
        leaf->size_keys++;
        break;
      }
      x = port.sub.get();
    }
    if (leaf->size_keys >= 4 * (B() / 2)) split_leaf(*path.back(), leaf_port);
    for (auto it = path.rbegin(); it != path.rend(); ++it)
      if ((*it)->size_keys >= 4 * std::max<std::uint64_t>(1, (*it)->birth_size))
        split_supernode(*it);
  }

  void split_leaf(Supernode& x, std::size_t p) {
    SnScope scope(t, &x);
    DataLeaf* leaf = x.ports[p].leaf.get();
    std::vector<Key> keys;
    for (auto it = t.present_.upper_bound(leaf->range.lo);
         it != t.present_.end() && *it <= leaf->range.hi; ++it)
      keys.push_back(*it);
    check(keys.size() >= 2, "splitting a leaf with fewer than two keys");
    Key pivot = keys[(keys.size() + 1) / 2 - 1];

    auto right = std::make_unique<DataLeaf>();
    right->block = m.store.allocate(Payload{});
    right->range = {pivot, leaf->range.hi};
    leaf->range.hi = pivot;
    auto cut = leaf->data.upper_bound(pivot);
    right->data.insert(cut, leaf->data.end());
    leaf->data.erase(cut, leaf->data.end());
    leaf->size_keys = (keys.size() + 1) / 2;
    right->size_keys = keys.size() - leaf->size_keys;

    if (cfg.charge_splits) {
      touch_read(leaf->block, leaf->size_keys, IoCategory::Split);
      touch_write(leaf->block, leaf->size_keys, IoCategory::Split);
      touch_write(right->block, right->size_keys, IoCategory::Split);
      m.store.charge(IoCategory::Split, 1);  // hosting structure rewrite
    }
    t.totals_.leaf_splits++;

    Port np;
    np.leaf = std::move(right);
    insert_port_after(x, p, std::move(np), pivot);
  }

  void split_supernode(Supernode* x) {
    if (x->ports.size() < 2) {
      SnScope scope(t, x);
      std::uint64_t blocks = teardown_internals(*x);
      if (t.loaded_) m.store.charge(IoCategory::Rebuild, blocks);
      build_internals(*x);
      t.totals_.supernode_splits++;
      return;
    }
    Supernode* parent = find_parent(t.root_.get(), x);

    std::uint64_t total = x->size_keys, prefix = 0, best_diff = UINT64_MAX;
    std::size_t cut = 1;
    for (std::size_t i = 1; i < x->ports.size(); ++i) {
      prefix += x->ports[i - 1].size_keys();
      std::uint64_t diff = prefix * 2 > total ? prefix * 2 - total : total - prefix * 2;
      if (diff < best_diff) {
        best_diff = diff;
        cut = i;
      }
    }
    Key pivot = x->ports[cut - 1].range().hi;

    {
      // The old internals go away before ports move out.
      SnScope scope(t, x);
      std::uint64_t blocks = teardown_internals(*x);
      if (t.loaded_) m.store.charge(IoCategory::Rebuild, blocks);
    }
    auto right = std::make_unique<Supernode>();
    right->height = x->height;
    right->range = {pivot, x->range.hi};
    x->range.hi = pivot;
    for (std::size_t i = cut; i < x->ports.size(); ++i)
      right->ports.push_back(std::move(x->ports[i]));
    x->ports.resize(cut);
    right->size_keys = 0;
    for (Port& p : right->ports) right->size_keys += p.size_keys();
    x->size_keys -= right->size_keys;
    Supernode* right_raw = right.get();

    {
      SnScope scope(t, x);
      build_internals(*x);
    }
    t.totals_.supernode_splits++;

    if (!parent) {
      auto new_root = std::make_unique<Supernode>();
      new_root->height = x->height + 1;
      new_root->range = KeyRange::all();
      Port left_port;
      left_port.sub = std::move(t.root_);
      Port right_port;
      right_port.sub = std::move(right);
      new_root->ports.push_back(std::move(left_port));
      new_root->ports.push_back(std::move(right_port));
      new_root->size_keys =
          new_root->ports[0].size_keys() + new_root->ports[1].size_keys();
      t.root_ = std::move(new_root);
      {
        SnScope scope(t, right_raw);
        build_internals(*right_raw);
      }
      SnScope scope(t, t.root_.get());
      build_internals(*t.root_);
      return;
    }
    {
      SnScope scope(t, right_raw);
      build_internals(*right_raw);
    }
    std::size_t pos = 0;
    while (parent->ports[pos].sub.get() != x) ++pos;
    Port np;
    np.sub = std::move(right);
    SnScope scope(t, parent);
    insert_port_after(*parent, pos, std::move(np), pivot);
  }

  Supernode* find_parent(Supernode* cur, Supernode* target) const {
    if (cur == target) return nullptr;
    for (Port& p : cur->ports) {
      if (p.is_leaf()) continue;
      if (p.sub.get() == target) return cur;
      if (p.sub->range.lo < target->range.hi && target->range.hi <= p.sub->range.hi)
        return find_parent(p.sub.get(), target);
    }
    return nullptr;
  }

  // Flush a supernode's internal buffers down and free the structures.
  // Returns the block count of the torn-down region (for rebuild charging).
  std::uint64_t teardown_internals(Supernode& x) {
    {
      MicroScope ms(t, &x.m0);
      for (Micro::Slot& s : x.m0.slots) flush_slot(x, x.m0, s);
      for (Micro::Seg& seg : x.m0.segs) {
        std::vector<SegmentFct::Delivery> out;
        seg.fct->take_all(out);
        route_deliveries(x, x.m0, seg.unit_lo, std::move(out));
      }
    }
    for (Micro& bm : x.bottoms) {
      MicroScope ms(t, &bm);
      for (Micro::Slot& s : bm.slots) flush_slot(x, bm, s);
      for (Micro::Seg& seg : bm.segs) {
        std::vector<SegmentFct::Delivery> out;
        seg.fct->take_all(out);
        route_deliveries(x, bm, seg.unit_lo, std::move(out));
      }
    }
    std::uint64_t blocks = 1;
    discard_micro_structures(x.m0);
    if (x.m0.base.v) {
      m.cache.forget(x.m0.base);
      m.store.deallocate(x.m0.base);
    }
    for (Micro& bm : x.bottoms) {
      discard_micro_structures(bm);
      m.cache.forget(bm.base);
      m.store.deallocate(bm.base);
      blocks++;
    }
    x.bottoms.clear();
    return blocks;
  }

  // Fresh internals for a (re)born supernode: micro partition, valid-pivot
  // snapshot, window reset.
  void build_internals(Supernode& x) {
    std::size_t n = x.ports.size();
    std::uint64_t f2 = cfg.bd2();
    x.bottoms.clear();
    std::vector<std::size_t> sizes =
        n <= f2 ? std::vector<std::size_t>{n} : even_groups(n, f2);
    std::size_t at = 0;
    for (std::size_t cnt : sizes) {
      Micro mi;
      mi.unit_lo = at;
      mi.unit_hi = at + cnt;
      mi.base = m.store.allocate(Payload{});
      x.bottoms.push_back(std::move(mi));
      at += cnt;
    }
    x.m0 = Micro{};
    x.m0.unit_lo = 0;
    x.m0.unit_hi = x.bottoms.size();
    x.m0.base = m.store.allocate(Payload{});
    build_micro_partition(x, x.m0, {});
    for (Micro& bm : x.bottoms) build_micro_partition(x, bm, {});

    x.valid_pivots.clear();
    for (std::size_t i = 0; i + 1 < n; ++i) x.valid_pivots.push_back(x.ports[i].range().hi);
    x.birth_size = x.size_keys;
    x.lifetimes++;
    for (Port& p : x.ports) {
      p.win_r = p.win_w = 0;
      p.life_r = p.life_w = 0;
    }
    // Window state resets per lifetime; the report counters carry over.
    Window fresh;
    fresh.windows_started = x.win.windows_started;
    fresh.crossings = x.win.crossings;
    fresh.converged = x.win.converged;
    fresh.phases_total = x.win.phases_total;
    fresh.max_phases_in_window = x.win.max_phases_in_window;
    fresh.split_terminations = x.win.split_terminations;
    x.win = fresh;
    start_fresh_window(x, false);
  }

  // A port at position p split in two; the new right half arrives as `np`.
  void insert_port_after(Supernode& x, std::size_t p, Port np, Key pivot) {
    std::size_t j = x.bottom_of_port(p);
    Micro& bm = x.bottoms[j];
    int si_before = bm.slot_for(p);
    bool was_active_shortcut = si_before >= 0 && !bm.slots[si_before].orphan;

    x.ports.insert(x.ports.begin() + p + 1, std::move(np));
    bm.unit_hi++;
    for (std::size_t jj = j + 1; jj < x.bottoms.size(); ++jj) {
      x.bottoms[jj].unit_lo++;
      x.bottoms[jj].unit_hi++;
      for (Micro::Slot& s : x.bottoms[jj].slots) s.unit++;
      for (Micro::Seg& seg : x.bottoms[jj].segs) {
        seg.unit_lo++;
        seg.unit_hi++;
      }
    }
    auto shift_anchor = [&](int& a) {
      if (a >= 0 && std::size_t(a) > p) a++;
    };
    shift_anchor(x.win.q);
    shift_anchor(x.win.r);
    shift_anchor(x.win.s);

    Micro::Seg* hosting = nullptr;
    for (Micro::Slot& s : bm.slots)
      if (s.unit > p) s.unit++;
    for (Micro::Seg& seg : bm.segs) {
      if (seg.unit_lo > p) {
        seg.unit_lo++;
        seg.unit_hi++;
      } else if (p >= seg.unit_lo && p < seg.unit_hi) {
        seg.unit_hi++;
        hosting = &seg;
      }
    }

    int si = bm.slot_for(p);
    if (si >= 0) {
      // Slotted port split: the left half keeps the slot; the right half gets
      // a fresh singleton segment. A shortcut-leaf split ends the window.
      Micro::Slot& s = bm.slots[si];
      bpt::Buffer left, right;
      for (auto& [k, msg] : s.buf.msgs) (k <= pivot ? left : right).add(msg);
      s.buf = std::move(left);
      Micro::Seg seg;
      seg.unit_lo = p + 1;
      seg.unit_hi = p + 2;
      seg.fct = std::make_unique<SegmentFct>(m, std::vector<Key>{},
                                             x.ports[p + 1].size_keys());
      auto at = std::upper_bound(
          bm.segs.begin(), bm.segs.end(), seg.unit_lo,
          [](std::size_t lo, const Micro::Seg& g) { return lo < g.unit_lo; });
      Micro::Seg* inserted = &*bm.segs.insert(at, std::move(seg));
      if (!right.msgs.empty()) {
        std::vector<SegmentFct::Delivery> out;
        for (auto& [k, msg] : right.msgs) inserted->fct->deposit(msg, out);
        route_deliveries(x, bm, inserted->unit_lo, std::move(out));
      }
      if (was_active_shortcut) {
        x.win.split_terminations++;
        start_fresh_window(x, false);
      }
    } else {
      check(hosting != nullptr, "split port unassigned in its bottom micro");
      hosting->fct->split_unit(p - hosting->unit_lo, pivot);
    }
    check_bottoms(x);
  }

  void check_bottoms(const Supernode& x) const {
    std::size_t at = 0;
    for (const Micro& bm : x.bottoms) {
      check(bm.unit_lo == at, "bottom micros tile the ports");
      check(bm.unit_hi > bm.unit_lo, "empty bottom micro");
      at = bm.unit_hi;
    }
    check(at == x.ports.size(), "bottom micros cover all ports");
  }

  // ----------------------------------------------------------------- builds
  void bulk_load(const std::vector<Key>& sorted_keys) {
    t.present_.insert(sorted_keys.begin(), sorted_keys.end());
    std::vector<std::unique_ptr<DataLeaf>> leaves;
    std::size_t n = sorted_keys.size();
    std::uint64_t fill = B();
    std::vector<std::size_t> sizes = n <= fill
                                         ? std::vector<std::size_t>{n}
                                         : even_groups(n, std::size_t(fill));
    std::size_t at = 0;
    Key lo = KeyRange::all().lo;
    for (std::size_t gi = 0; gi < sizes.size(); ++gi) {
      auto leaf = std::make_unique<DataLeaf>();
      leaf->block = m.store.allocate(Payload{});
      std::size_t cnt = sizes[gi];
      for (std::size_t i = 0; i < cnt; ++i) leaf->data.emplace(sorted_keys[at + i], Word{0});
      at += cnt;
      Key hi = gi + 1 == sizes.size() ? KeyRange::all().hi
                                      : sorted_keys[at - 1];
      leaf->range = {lo, hi};
      leaf->size_keys = cnt;
      lo = hi;
      leaves.push_back(std::move(leaf));
    }
    build_skeleton(std::move(leaves));
    t.loaded_ = true;
  }

  void build_skeleton(std::vector<std::unique_ptr<DataLeaf>> leaves) {
    std::uint64_t f = cfg.bd();
    std::vector<std::unique_ptr<Supernode>> level;
    {
      std::vector<std::size_t> sizes =
          leaves.size() <= 4 * f ? std::vector<std::size_t>{leaves.size()}
                                 : even_groups(leaves.size(), std::size_t(f));
      std::size_t at = 0;
      for (std::size_t cnt : sizes) {
        auto sn = std::make_unique<Supernode>();
        sn->height = 1;
        for (std::size_t i = 0; i < cnt; ++i) {
          Port p;
          p.leaf = std::move(leaves[at + i]);
          sn->size_keys += p.leaf->size_keys;
          sn->ports.push_back(std::move(p));
        }
        at += cnt;
        sn->range = {sn->ports.front().range().lo, sn->ports.back().range().hi};
        level.push_back(std::move(sn));
      }
    }
    int height = 2;
    while (level.size() > 4 * f) {
      std::vector<std::unique_ptr<Supernode>> next;
      std::vector<std::size_t> sizes = even_groups(level.size(), std::size_t(f));
      std::size_t at = 0;
      for (std::size_t cnt : sizes) {
        auto sn = std::make_unique<Supernode>();
        sn->height = height;
        for (std::size_t i = 0; i < cnt; ++i) {
          Port p;
          p.sub = std::move(level[at + i]);
          sn->size_keys += p.sub->size_keys;
          sn->ports.push_back(std::move(p));
        }
        at += cnt;
        sn->range = {sn->ports.front().range().lo, sn->ports.back().range().hi};
        next.push_back(std::move(sn));
      }
      level = std::move(next);
      ++height;
    }
    if (level.size() == 1) {
      t.root_ = std::move(level.front());
    } else {
      auto root = std::make_unique<Supernode>();
      root->height = height;
      for (auto& sn : level) {
        Port p;
        p.sub = std::move(sn);
        root->size_keys += p.sub->size_keys;
        root->ports.push_back(std::move(p));
      }
      t.root_ = std::move(root);
    }
    t.root_->range = KeyRange::all();
    init_internals(t.root_.get());
  }

  void init_internals(Supernode* x) {
    for (Port& p : x->ports)
      if (!p.is_leaf()) init_internals(p.sub.get());
    SnScope scope(t, x);
    build_internals(*x);
  }

  // ----------------------------------------------------------------- report
  void collect_report(const Supernode* x, RunReport& rep, bool reshortcut) const {
    SupernodeReport r;
    r.height = x->height;
    r.size_keys = x->size_keys;
    r.windows = x->win.windows_started;
    r.phases = x->win.phases_total;
    r.crossings = x->win.crossings;
    r.converged_windows = x->win.converged;
    r.split_terminations = x->win.split_terminations;
    r.io_clock = x->io_clock;
    r.rebuild_io = x->rebuild_io_here;
    r.rebuild_fraction = x->io_clock ? double(x->rebuild_io_here) / double(x->io_clock) : 0.0;
    std::uint64_t thr = cfg.micro_converge_threshold();
    std::uint64_t conv = 0, never_io = 0, total_io = 0;
    for (const Micro& bm : x->bottoms) {
      bool converged = bm.io_age >= thr && !bm.shortcut_changed_in_age;
      if (converged) ++conv;
      total_io += bm.lifetime_io;
      if (!converged && bm.clobbers <= 1) never_io += bm.lifetime_io;
    }
    r.converged_micro_fraction =
        x->bottoms.empty() ? 0.0 : double(conv) / double(x->bottoms.size());
    r.never_converged_io_fraction = total_io ? double(never_io) / double(total_io) : 0.0;
    if (reshortcut) r.reshortcut_ratio = reshortcut_ratio(*x);
    rep.supernodes.push_back(r);
    for (const Port& p : x->ports)
      if (!p.is_leaf()) collect_report(p.sub.get(), rep, reshortcut);
  }

  double reshortcut_ratio(const Supernode& x) const {
    if (x.valid_pivots.empty() || x.bottoms.empty()) return 0.0;
    std::size_t n = x.ports.size();
    std::vector<std::uint64_t> pr(n + 1, 0), pw(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
      pr[i + 1] = pr[i] + x.ports[i].life_r;
      pw[i + 1] = pw[i] + x.ports[i].life_w;
    }
    double best = -1.0;
    for (Key p : x.valid_pivots) {
      std::size_t port = 0;
      while (port + 1 < n && x.ports[port].range().hi < p) ++port;
      std::size_t j = x.bottom_of_port(port);
      const Micro& host = x.bottoms[j];
      double cost_sum = 0.0;
      for (const Micro& bm : x.bottoms)
        if (&bm != &host) cost_sum += double(bm.lifetime_io);
      std::size_t lo = host.unit_lo, hi = host.unit_hi;
      std::uint64_t rl = pr[port] - pr[lo], wl = pw[port] - pw[lo];
      std::uint64_t rr = pr[hi] - pr[port + 1], wr = pw[hi] - pw[port + 1];
      cost::Scaled split = ell_split_cost_scaled(B(), port - lo, rl, wl, hi - port - 1, rr, wr,
                                                 x.ports[port].life_r, x.ports[port].life_w);
      cost_sum += double(split) / double(B());
      if (best < 0 || cost_sum < best) best = cost_sum;
    }
    return best > 0.0 ? double(x.io_clock) / best : 0.0;
  }

  void validate(const Supernode* x) const {
    check(!x->ports.empty(), "supernode without ports");
    Key lo = x->range.lo;
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < x->ports.size(); ++i) {
      KeyRange r = x->ports[i].range();
      check(r.lo == lo, "port ranges partition the supernode range");
      lo = r.hi;
      sum += x->ports[i].size_keys();
      if (!x->ports[i].is_leaf()) validate(x->ports[i].sub.get());
    }
    check(lo == x->range.hi, "last port reaches the supernode boundary");
    check(sum == x->size_keys, "supernode size equals its port sizes");
    check_bottoms(*x);
    auto check_micro = [&](const Micro& mi) {
      std::uint64_t active = 0;
      for (const Micro::Slot& s : mi.slots) active += !s.orphan;
      check(active <= 3, "at most three active shortcut slots per micro");
      for (std::size_t u = mi.unit_lo; u < mi.unit_hi; ++u) {
        bool slotted = mi.slot_for(u) >= 0;
        int covered = 0;
        for (const Micro::Seg& g : mi.segs)
          if (u >= g.unit_lo && u < g.unit_hi) ++covered;
        check(slotted ? covered == 0 : covered == 1,
              "every unit is in exactly one slot or segment");
      }
    };
    check_micro(x->m0);
    for (const Micro& bm : x->bottoms) check_micro(bm);
  }
};

// ---------------------------------------------------------------------------
// JelloTree

JelloTree::JelloTree(machine::Machine& m, const Config& cfg, std::uint64_t n_hint)
    : m_(&m), cfg_(cfg), n_hint_(n_hint) {
  cfg.validate(std::max<std::uint64_t>(2, n_hint));
  listener_ = [this](machine::IoCategory, std::uint64_t n) {
    if (!sn_stack_.empty()) {
      Supernode* x = sn_stack_.back();
      x->io_clock += n;
      Window& w = x->win;
      w.window_io += n;
      if (!w.settled && w.phase >= 1) w.budget = w.budget > n ? w.budget - n : 0;
    }
    if (!micro_stack_.empty() && micro_stack_.back()) {
      Micro* mi = micro_stack_.back();
      mi->io_age += n;
      mi->lifetime_io += n;
    }
  };
  m_->store.add_listener(&listener_);
}

JelloTree::~JelloTree() { m_->store.remove_listener(&listener_); }

void JelloTree::bulk_load(const std::vector<Key>& sorted_keys) {
  JelloOps ops(*this);
  ops.bulk_load(sorted_keys);
}

void JelloTree::execute(const Op& op, std::optional<Word>* answer) {
  JelloOps ops(*this);
  if (op.kind == OpKind::Query) {
    auto a = ops.query(op.key);
    if (answer) *answer = a;
    totals_.queries++;
    return;
  }
  totals_.writes++;
  if (!present_.count(op.key)) ops.note_new_key(op.key);
  std::vector<Message> one;
  one.push_back({op.key, op.val, next_seq_++});
  ops.ingress(*root_, std::move(one));
}

int JelloTree::opt_shortcut(const Supernode& x) const {
  JelloOps ops(const_cast<JelloTree&>(*this));
  return ops.opt_shortcut(x);
}

void JelloTree::validate() const {
  JelloOps ops(const_cast<JelloTree&>(*this));
  ops.validate(root_.get());
}

RunReport JelloTree::report(bool with_reshortcut_audit) const {
  RunReport rep = totals_;
  rep.ledger = m_->ledger();
  JelloOps ops(const_cast<JelloTree&>(*this));
  ops.collect_report(root_.get(), rep, with_reshortcut_audit);
  std::uint64_t bd = cfg_.bd();
  rep.additive_term = std::min(double(rep.writes) / double(bd),
                               double(rep.queries) * double(cost::log2_exact(bd)));
  return rep;
}

RunReport jello_run(const Trace& trace, const Config& cfg, const std::vector<Key>& preload) {
  cfg.validate(std::max<std::uint64_t>(2, preload.size()));
  machine::Machine m(cfg.b, cfg.cache_threshold(std::max<std::uint64_t>(1, preload.size())));
  m.ledger().speed_limit_k = cfg.speed_limit_k;
  JelloTree tree(m, cfg, preload.size());
  tree.bulk_load(preload);
  for (const Op& op : trace) tree.execute(op);
  return tree.report(true);
}

// ---------------------------------------------------------------------------
// Fixed-pivot variant

FixedPivotTree::FixedPivotTree(machine::Machine& m, const Config& cfg,
                               const std::vector<Key>& keys)
    : m_(&m), cfg_(cfg) {
  cfg.validate(std::max<std::uint64_t>(2, keys.size()));
  std::uint64_t f = cfg.bd();
  check(f >= 4, "B^delta must be at least 4");
  check(!keys.empty() && cost::is_pow2(keys.size()),
        "fixed-pivot variant requires a power-of-two key count");
  present_.insert(keys.begin(), keys.end());
  restart_period_ = f * std::uint64_t(cost::log2_exact(f));

  std::uint64_t per_leaf = std::min<std::uint64_t>(std::uint64_t(m.B()), keys.size());
  std::size_t leaf_count = keys.size() / per_leaf;
  Key lo = KeyRange::all().lo;
  for (std::size_t i = 0; i < leaf_count; ++i) {
    DataLeaf leaf;
    leaf.block = m.store.allocate(Payload{});
    for (std::size_t k = i * per_leaf; k < (i + 1) * per_leaf; ++k)
      leaf.data.emplace(keys[k], Word{0});
    Key hi = i + 1 == leaf_count ? KeyRange::all().hi : keys[(i + 1) * per_leaf - 1];
    leaf.range = {lo, hi};
    leaf.size_keys = per_leaf;
    lo = hi;
    leaves_.push_back(std::move(leaf));
  }

  std::vector<int> level;
  for (std::size_t i = 0; i < leaves_.size(); ++i) level.push_back(~int(i));
  auto range_of = [&](int id) { return id >= 0 ? nodes_[id].range : leaves_[~id].range; };
  auto keys_of = [&](int id) {
    return id >= 0 ? nodes_[id].covered_keys : leaves_[~id].size_keys;
  };
  do {
    std::size_t groups = (level.size() + f - 1) / f;
    std::vector<int> next;
    for (std::size_t g = 0; g < groups; ++g) {
      FpNode node;
      std::size_t lo_i = g * f, hi_i = std::min(level.size(), (g + 1) * f);
      for (std::size_t i = lo_i; i < hi_i; ++i) {
        node.children.push_back(level[i]);
        if (i + 1 < hi_i) node.child_his.push_back(range_of(level[i]).hi);
        node.covered_keys += keys_of(level[i]);
      }
      node.range = {range_of(level[lo_i]).lo, range_of(level[hi_i - 1]).hi};
      node.seg = std::make_unique<SegmentFct>(m, node.child_his, node.covered_keys);
      int id = int(nodes_.size());
      nodes_.push_back(std::move(node));
      next.push_back(id);
    }
    level = std::move(next);
    ++levels_;
  } while (level.size() > 1);
  root_ = level.front();
}

void FixedPivotTree::tick_clock(int node_idx, std::uint64_t n) {
  FpNode& node = nodes_[node_idx];
  node.io_clock += n;
  if (node.io_clock >= restart_period_) {
    node.io_clock = 0;
    node.restarts++;
    forced_restarts_++;
    std::vector<SegmentFct::Delivery> out;
    node.seg->force_restart(out);
    deliver(node_idx, std::move(out));
  }
}

void FixedPivotTree::deliver(int node_idx, std::vector<SegmentFct::Delivery>&& ds) {
  FpNode& node = nodes_[node_idx];
  for (auto& d : ds) {
    int child = node.children[d.unit];
    // One batch hop per delivery into the child region.
    BlockId dest = child < 0 ? leaves_[~child].block : nodes_[child].seg->ingress_block();
    std::uint64_t dest_keys = child < 0 ? leaves_[~child].size_keys : nodes_[child].covered_keys;
    for (std::uint64_t i = 0; i < d.batches; ++i) {
      m_->cache.note_node_size(dest, dest_keys);
      machine::read_block(m_->store, m_->cache, dest, IoCategory::Flush);
      machine::write_block(m_->store, m_->cache, dest, Payload{}, IoCategory::Flush);
    }
    if (child < 0) {
      DataLeaf& leaf = leaves_[~child];
      for (Message& msg : d.msgs) {
        check(leaf.range.contains(msg.key), "fixed-pivot message delivered to the wrong leaf");
        leaf.data[msg.key] = msg.val;
      }
    } else {
      for (Message& msg : d.msgs) deposit_into(child, msg);
    }
  }
}

void FixedPivotTree::deposit_into(int node_idx, const Message& msg) {
  FpNode& node = nodes_[node_idx];
  std::uint64_t before = m_->ledger().total();
  std::vector<SegmentFct::Delivery> out;
  node.seg->deposit(msg, out);
  node.seg->after_op(OpKind::Insert, out);
  deliver(node_idx, std::move(out));
  tick_clock(node_idx, m_->ledger().total() - before);
}

void FixedPivotTree::execute(const Op& op, std::optional<Word>* answer) {
  if (op.kind == OpKind::Query) {
    int id = root_;
    std::optional<Word> buffered;
    while (id >= 0) {
      FpNode& node = nodes_[id];
      std::size_t unit = std::size_t(bpt::route_index(node.child_his, op.key));
      std::uint64_t before = m_->ledger().total();
      const Message* msg = node.seg->query_path(op.key, unit);
      // Copy before after_op: a convergence rebuild would invalidate it.
      if (msg) buffered = msg->val;
      std::vector<SegmentFct::Delivery> out;
      node.seg->after_op(OpKind::Query, out);
      deliver(id, std::move(out));
      tick_clock(id, m_->ledger().total() - before);
      if (buffered) break;  // newest wins; anything deeper is older
      id = node.children[unit];
    }
    std::optional<Word> a;
    if (buffered) {
      a = buffered;
    } else if (id < 0) {
      DataLeaf& leaf = leaves_[~id];
      m_->cache.note_node_size(leaf.block, leaf.size_keys);
      machine::read_block(m_->store, m_->cache, leaf.block, IoCategory::Search);
      auto it = leaf.data.find(op.key);
      if (it != leaf.data.end()) a = it->second;
    }
    if (answer) *answer = a;
    return;
  }
  if (!present_.count(op.key))
    throw std::invalid_argument("fixed-pivot tree is fixed-key: new-key inserts are rejected");
  deposit_into(root_, Message{op.key, op.val, next_seq_++});
}

FixedPivotReport FixedPivotTree::report() const {
  FixedPivotReport r;
  r.ledger = m_->ledger();
  r.forced_restarts = forced_restarts_;
  r.supernode_levels = levels_;
  for (const FpNode& n : nodes_) r.final_fanouts.push_back(n.seg->physical_fanout());
  return r;
}

FixedPivotReport fixed_pivot_tree_run(const Trace& trace, const Config& cfg,
                                      const std::vector<Key>& keys) {
  machine::Machine m(cfg.b, cfg.cache_threshold(std::max<std::uint64_t>(1, keys.size())));
  m.ledger().speed_limit_k = cfg.speed_limit_k;
  FixedPivotTree tree(m, cfg, keys);
  for (const Op& op : trace) tree.execute(op);
  return tree.report();
}

}  // namespace bufprop::jello
