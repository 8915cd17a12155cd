#include "bufprop/bpt.hpp"

#include <algorithm>
#include <cmath>

#include "bufprop/check.hpp"
#include "bufprop/cost_model.hpp"

namespace bufprop::bpt {

using machine::BlockId;
using machine::IoCategory;
using machine::Payload;

int route_index(const std::vector<Key>& pivots, Key key) {
  // First pivot >= key; child j owns (p_{j-1}, p_j].
  auto it = std::lower_bound(pivots.begin(), pivots.end(), key);
  return int(it - pivots.begin());
}

bool enqueue_message(Node& node, const Message& msg, std::uint64_t capacity) {
  check(node.range.contains(msg.key), "enqueue_message: key outside node range");
  int j = route_index(node.pivots, msg.key);
  node.buffers[j].add(msg);
  return node.buffers[j].size() > capacity;
}

Tree::Tree(machine::Machine& m, std::uint64_t fanout, CostPolicy policy)
    : m_(&m), fanout_(fanout), policy_(policy) {
  check(fanout >= 2 && cost::is_pow2(fanout), "tree fanout must be a power of two >= 2");
  check(fanout <= std::uint64_t(m.B()), "tree fanout must be <= B");
  cap_ = std::max<std::uint64_t>(1, std::uint64_t(m.B()) / fanout_);
}

namespace {

// Even chunking: g groups with sizes differing by at most one.
std::vector<std::size_t> even_groups(std::size_t n, std::size_t max_per_group) {
  std::size_t g = (n + max_per_group - 1) / max_per_group;
  std::vector<std::size_t> sizes(g, n / g);
  for (std::size_t i = 0; i < n % g; ++i) sizes[i]++;
  return sizes;
}

}  // namespace

void Tree::bulk_load(const std::vector<Key>& sorted_keys) {
  check(leaves_.empty(), "bulk_load on a non-empty tree");
  const std::uint64_t fill = std::uint64_t(m_->B());  // leaf fill at build: 2 * target
  present_.insert(sorted_keys.begin(), sorted_keys.end());

  std::size_t n = sorted_keys.size();
  if (n == 0) {
    auto leaf = std::make_unique<Leaf>();
    leaf->block = m_->store.allocate(Payload{});
    leaf->range = KeyRange::all();
    leaves_.push_back(std::move(leaf));
    return;
  }
  std::vector<std::size_t> sizes =
      n <= fill ? std::vector<std::size_t>{n} : even_groups(n, fill);
  std::size_t at = 0;
  Key lo = KeyRange::all().lo;
  for (std::size_t gi = 0; gi < sizes.size(); ++gi) {
    auto leaf = std::make_unique<Leaf>();
    leaf->block = m_->store.allocate(Payload{});
    std::size_t cnt = sizes[gi];
    for (std::size_t i = 0; i < cnt; ++i) leaf->data.emplace(sorted_keys[at + i], Word{0});
    at += cnt;
    Key hi = gi + 1 == sizes.size() ? KeyRange::all().hi : sorted_keys[at - 1];
    leaf->range = {lo, hi};
    leaf->size_keys = cnt;
    lo = hi;
    refresh_pin(leaf.get());
    leaves_.push_back(std::move(leaf));
  }
  build_internal(fanout_);
}

void Tree::build_internal(std::uint64_t fanout) {
  nodes_.clear();
  root_ = nullptr;
  if (leaves_.size() <= 1) return;

  std::vector<Child> level;
  for (auto& l : leaves_) {
    l->parent = nullptr;
    level.push_back(Child{nullptr, l.get()});
  }
  std::uint64_t child_target = std::uint64_t(m_->B()) / 2;

  auto child_range = [](const Child& c) { return c.node ? c.node->range : c.leaf->range; };
  auto child_size = [](const Child& c) { return c.node ? c.node->size_keys : c.leaf->size_keys; };

  while (true) {
    bool is_root_level = level.size() <= fanout;
    std::vector<std::size_t> sizes =
        is_root_level ? std::vector<std::size_t>{level.size()} : even_groups(level.size(), fanout);
    std::vector<Child> next;
    std::size_t at = 0;
    for (std::size_t cnt : sizes) {
      auto node = std::make_unique<Node>();
      node->block = m_->store.allocate(Payload{});
      node->target_size = child_target * fanout;
      for (std::size_t i = 0; i < cnt; ++i) {
        Child c = level[at + i];
        node->children.push_back(c);
        node->size_keys += child_size(c);
        if (i + 1 < cnt) node->pivots.push_back(child_range(c).hi);
        if (c.node)
          c.node->parent = node.get();
        else
          c.leaf->parent = node.get();
      }
      node->range = {child_range(level[at]).lo, child_range(level[at + cnt - 1]).hi};
      node->buffers.resize(cnt);
      at += cnt;
      refresh_pin(node.get());
      next.push_back(Child{node.get(), nullptr});
      nodes_.push_back(std::move(node));
    }
    if (is_root_level) {
      root_ = next.front().node;
      root_->parent = nullptr;
      break;
    }
    level = std::move(next);
    child_target *= fanout;
  }
}

int Tree::height() const {
  int h = 0;
  const Node* n = root_;
  while (n) {
    ++h;
    n = n->children.front().node;
  }
  return h;
}

std::uint64_t Tree::buffered() const {
  std::uint64_t n = 0;
  for (const auto& node : nodes_) n += node->buffered_messages();
  return n;
}

void Tree::refresh_pin(Node* n) { m_->cache.note_node_size(n->block, n->size_keys); }
void Tree::refresh_pin(Leaf* l) { m_->cache.note_node_size(l->block, l->size_keys); }

Leaf* Tree::route_to_leaf(Key key) const {
  if (!root_) return leaves_.front().get();
  Node* n = root_;
  while (true) {
    int j = route_index(n->pivots, key);
    Child c = n->children[j];
    if (c.leaf) return c.leaf;
    n = c.node;
  }
}

std::optional<Word> Tree::query(Key key) {
  Node* n = root_;
  while (n) {
    machine::read_block(m_->store, m_->cache, n->block, IoCategory::Search);
    int j = route_index(n->pivots, key);
    if (const Message* msg = n->buffers[j].find(key)) return msg->val;
    Child c = n->children[j];
    if (c.leaf) {
      machine::read_block(m_->store, m_->cache, c.leaf->block, IoCategory::Search);
      auto it = c.leaf->data.find(key);
      return it == c.leaf->data.end() ? std::nullopt : std::optional<Word>(it->second);
    }
    n = c.node;
  }
  Leaf* leaf = leaves_.front().get();
  machine::read_block(m_->store, m_->cache, leaf->block, IoCategory::Search);
  auto it = leaf->data.find(key);
  return it == leaf->data.end() ? std::nullopt : std::optional<Word>(it->second);
}

void Tree::write(const Op& op) {
  check(op.kind != OpKind::Query, "write called with a query");
  if (!present_.count(op.key)) note_new_key(op.key);
  Message msg{op.key, op.val, next_seq_++};
  ++issued_;
  if (!root_) {
    // Single leaf: the operation applies in place, no batch hops exist.
    leaves_.front()->data[msg.key] = msg.val;
    ++applied_;
    return;
  }
  deposit(root_, msg);
}

void Tree::execute(const Op& op, std::optional<Word>* answer) {
  if (op.kind == OpKind::Query) {
    auto a = query(op.key);
    if (answer) *answer = a;
  } else {
    write(op);
  }
}

void Tree::deposit(Node* node, Message msg) {
  int j = route_index(node->pivots, msg.key);
  if (!node->buffers[j].add(msg)) ++superseded_;
  if (node->buffers[j].size() > cap_) flush(node, j);
}

void Tree::flush(Node* node, std::size_t child_idx) {
  Buffer buf = std::move(node->buffers[child_idx]);
  node->buffers[child_idx] = Buffer{};
  if (buf.empty()) return;

  std::uint64_t batches = flush_batches(buf.size(), cap_);
  max_overflow_seen_ = std::max(max_overflow_seen_, std::uint64_t(buf.size()));
  Child c = node->children[child_idx];
  BlockId child_block = c.leaf ? c.leaf->block : c.node->block;
  for (std::uint64_t b = 0; b < batches; ++b) {
    machine::read_block(m_->store, m_->cache, child_block, IoCategory::Flush);
    std::uint64_t occupancy = c.leaf ? std::min<std::uint64_t>(c.leaf->data.size(), m_->B())
                                     : std::min<std::uint64_t>(c.node->buffered_messages(), m_->B());
    machine::write_block(m_->store, m_->cache, child_block,
                         Payload{std::uint32_t(occupancy), {}}, IoCategory::Flush);
  }

  if (c.leaf) {
    apply_to_leaf(c.leaf, buf);
    return;
  }
  Node* child = c.node;
  for (auto& [key, msg] : buf.msgs) {
    int j = route_index(child->pivots, key);
    if (!child->buffers[j].add(msg)) ++superseded_;
  }
  for (std::size_t j = 0; j < child->buffers.size(); ++j)
    if (child->buffers[j].size() > cap_) flush(child, j);
}

void Tree::apply_to_leaf(Leaf* leaf, const Buffer& batch) {
  for (const auto& [key, msg] : batch.msgs) {
    check(leaf->range.contains(key), "message delivered to wrong leaf");
    leaf->data[key] = msg.val;
    ++applied_;
  }
}

std::uint64_t Tree::recount_range(const KeyRange& r) const {
  auto lo = present_.upper_bound(r.lo);
  auto hi = present_.upper_bound(r.hi);
  return std::uint64_t(std::distance(lo, hi));
}

void Tree::note_new_key(Key key) {
  present_.insert(key);
  Leaf* leaf = route_to_leaf(key);
  for (Node* n = leaf->parent; n; n = n->parent) {
    n->size_keys++;
    refresh_pin(n);
  }
  leaf->size_keys++;
  refresh_pin(leaf);
  Node* parent = leaf->parent;
  if (leaf->size_keys >= 4 * (std::uint64_t(m_->B()) / 2)) split_leaf(leaf);
  maybe_split_upward(parent);
}

void Tree::split_leaf(Leaf* leaf) {
  // Even partition at the median key of the leaf's current key range.
  std::vector<Key> keys;
  keys.reserve(leaf->size_keys);
  for (auto it = present_.upper_bound(leaf->range.lo);
       it != present_.end() && *it <= leaf->range.hi; ++it)
    keys.push_back(*it);
  check(keys.size() >= 2, "splitting a leaf with fewer than two keys");
  Key pivot = keys[(keys.size() + 1) / 2 - 1];

  auto right = std::make_unique<Leaf>();
  right->block = m_->store.allocate(Payload{});
  right->range = {pivot, leaf->range.hi};
  leaf->range.hi = pivot;
  auto split_at = leaf->data.upper_bound(pivot);
  right->data.insert(split_at, leaf->data.end());
  leaf->data.erase(split_at, leaf->data.end());
  leaf->size_keys = (keys.size() + 1) / 2;
  right->size_keys = keys.size() - leaf->size_keys;
  Leaf* right_raw = right.get();

  if (policy_.charge_splits) {
    machine::read_block(m_->store, m_->cache, leaf->block, IoCategory::Split);
    machine::write_block(m_->store, m_->cache, leaf->block, Payload{}, IoCategory::Split);
    machine::write_block(m_->store, m_->cache, right->block, Payload{}, IoCategory::Split);
    if (leaf->parent)
      machine::write_block(m_->store, m_->cache, leaf->parent->block, Payload{},
                           IoCategory::Split);
    else
      m_->store.charge(IoCategory::Split, 1);
  }

  auto pos = std::find_if(leaves_.begin(), leaves_.end(),
                          [&](const std::unique_ptr<Leaf>& p) { return p.get() == leaf; });
  check(pos != leaves_.end(), "split leaf not found");
  leaves_.insert(pos + 1, std::move(right));

  Node* parent = leaf->parent;
  if (!parent) {
    // The tree was a single leaf; grow a root.
    auto node = std::make_unique<Node>();
    node->block = m_->store.allocate(Payload{});
    node->range = KeyRange::all();
    node->target_size = fanout_ * (std::uint64_t(m_->B()) / 2);
    node->pivots = {pivot};
    node->children = {Child{nullptr, leaf}, Child{nullptr, right_raw}};
    node->buffers.resize(2);
    node->size_keys = leaf->size_keys + right_raw->size_keys;
    root_ = node.get();
    leaf->parent = root_;
    right_raw->parent = root_;
    refresh_pin(root_);
    nodes_.push_back(std::move(node));
  } else {
    std::size_t j = 0;
    while (parent->children[j].leaf != leaf) ++j;
    parent->pivots.insert(parent->pivots.begin() + j, pivot);
    parent->children.insert(parent->children.begin() + j + 1, Child{nullptr, right_raw});
    right_raw->parent = parent;
    // Buffered messages straddling the split pivot land with their own side.
    Buffer old = std::move(parent->buffers[j]);
    Buffer left_buf, right_buf;
    for (auto& [k, msg] : old.msgs) (k <= pivot ? left_buf : right_buf).add(msg);
    parent->buffers[j] = std::move(left_buf);
    parent->buffers.insert(parent->buffers.begin() + j + 1, std::move(right_buf));
  }
  refresh_pin(leaf);
  refresh_pin(right_raw);
}

void Tree::split_node(Node* node) {
  std::size_t cnt = node->children.size();
  check(cnt >= 2, "splitting a node with fewer than two children");

  // Boundary closest to half the node's size, by child sizes.
  auto child_size = [](const Child& c) { return c.node ? c.node->size_keys : c.leaf->size_keys; };
  std::uint64_t total = node->size_keys;
  std::uint64_t prefix = 0, best_diff = UINT64_MAX;
  std::size_t cut = 1;
  for (std::size_t i = 1; i < cnt; ++i) {
    prefix += child_size(node->children[i - 1]);
    std::uint64_t diff = prefix * 2 > total ? prefix * 2 - total : total - prefix * 2;
    if (diff < best_diff) {
      best_diff = diff;
      cut = i;
    }
  }

  auto right = std::make_unique<Node>();
  right->block = m_->store.allocate(Payload{});
  right->target_size = node->target_size;
  Key pivot = node->pivots[cut - 1];
  right->range = {pivot, node->range.hi};
  node->range.hi = pivot;
  right->children.assign(node->children.begin() + cut, node->children.end());
  right->buffers.assign(std::make_move_iterator(node->buffers.begin() + cut),
                        std::make_move_iterator(node->buffers.end()));
  right->pivots.assign(node->pivots.begin() + cut, node->pivots.end());
  node->children.resize(cut);
  node->buffers.resize(cut);
  node->pivots.resize(cut - 1);
  for (Child& c : right->children) {
    if (c.node)
      c.node->parent = right.get();
    else
      c.leaf->parent = right.get();
  }
  std::uint64_t right_size = 0;
  for (const Child& c : right->children) right_size += child_size(c);
  right->size_keys = right_size;
  node->size_keys -= right_size;
  Node* right_raw = right.get();

  if (policy_.charge_splits) {
    machine::read_block(m_->store, m_->cache, node->block, IoCategory::Split);
    machine::write_block(m_->store, m_->cache, node->block, Payload{}, IoCategory::Split);
    machine::write_block(m_->store, m_->cache, right->block, Payload{}, IoCategory::Split);
    if (node->parent)
      machine::write_block(m_->store, m_->cache, node->parent->block, Payload{},
                           IoCategory::Split);
    else
      m_->store.charge(IoCategory::Split, 1);
  }

  Node* parent = node->parent;
  if (!parent) {
    auto new_root = std::make_unique<Node>();
    new_root->block = m_->store.allocate(Payload{});
    new_root->range = KeyRange::all();
    new_root->target_size = node->target_size * fanout_;
    new_root->pivots = {pivot};
    new_root->children = {Child{node, nullptr}, Child{right_raw, nullptr}};
    new_root->buffers.resize(2);
    new_root->size_keys = node->size_keys + right_raw->size_keys;
    root_ = new_root.get();
    node->parent = root_;
    right_raw->parent = root_;
    refresh_pin(root_);
    nodes_.push_back(std::move(new_root));
  } else {
    std::size_t j = 0;
    while (parent->children[j].node != node) ++j;
    parent->pivots.insert(parent->pivots.begin() + j, pivot);
    parent->children.insert(parent->children.begin() + j + 1, Child{right_raw, nullptr});
    right_raw->parent = parent;
    Buffer old = std::move(parent->buffers[j]);
    Buffer left_buf, right_buf;
    for (auto& [k, msg] : old.msgs) (k <= pivot ? left_buf : right_buf).add(msg);
    parent->buffers[j] = std::move(left_buf);
    parent->buffers.insert(parent->buffers.begin() + j + 1, std::move(right_buf));
  }
  refresh_pin(node);
  refresh_pin(right_raw);
  nodes_.push_back(std::move(right));
}

void Tree::maybe_split_upward(Node* node) {
  while (node) {
    Node* parent = node->parent;
    if (node->size_keys >= 4 * node->target_size && node->children.size() >= 2)
      split_node(node);
    node = parent;
  }
}

std::uint64_t Tree::rebuild_internal(std::uint64_t new_fanout) {
  check(new_fanout >= 2 && cost::is_pow2(new_fanout), "rebuild fanout must be a power of two");
  if (new_fanout == fanout_) return 0;

  // Collect in-flight messages; they re-enter through the new root.
  std::vector<Message> pending;
  for (auto& node : nodes_)
    for (Buffer& b : node->buffers)
      for (auto& [k, msg] : b.msgs) pending.push_back(msg);
  for (auto& node : nodes_) {
    m_->cache.forget(node->block);
    m_->store.deallocate(node->block);
  }

  fanout_ = new_fanout;
  cap_ = std::max<std::uint64_t>(1, std::uint64_t(m_->B()) / fanout_);
  build_internal(fanout_);
  // Writing the new internal layers is the rebuild; the old layers are
  // discarded, which keeps the per-epoch chain a geometric series.
  std::uint64_t new_count = nodes_.size();
  m_->store.charge(IoCategory::Rebuild, new_count);

  if (!pending.empty()) {
    std::sort(pending.begin(), pending.end(),
              [](const Message& a, const Message& b) { return a.seq < b.seq; });
    if (!root_) {
      for (const Message& msg : pending) {
        leaves_.front()->data[msg.key] = msg.val;
        ++applied_;
      }
    } else {
      // Deposit without intermediate flushes, then repair overflowed buffers
      // at their usual theta(k) flush cost.
      for (const Message& msg : pending) {
        int j = route_index(root_->pivots, msg.key);
        if (!root_->buffers[j].add(msg)) ++superseded_;
      }
      for (std::size_t j = 0; j < root_->buffers.size(); ++j)
        if (root_->buffers[j].size() > cap_) flush(root_, j);
    }
  }
  return new_count;
}

bool Tree::batch_rebuild(std::uint64_t new_fanout) {
  if (!(new_fanout >= 2 && cost::is_pow2(new_fanout) && new_fanout <= std::uint64_t(m_->B())))
    return false;
  if (new_fanout == fanout_) {
    // Identity rebuild: X replaced by an identical Y; charge both sides.
    m_->store.charge(IoCategory::Rebuild, 2 * nodes_.size());
    return true;
  }
  rebuild_internal(new_fanout);
  validate();
  return true;
}

void Tree::drain() {
  if (!root_) return;
  // Parents first so cascades only move messages downward once.
  std::vector<Node*> order;
  std::vector<Node*> stack{root_};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (Child& c : n->children)
      if (c.node) stack.push_back(c.node);
  }
  for (Node* n : order)
    for (std::size_t j = 0; j < n->buffers.size(); ++j)
      if (!n->buffers[j].empty()) flush(n, j);
}

void Tree::validate() const {
  check(issued_ == applied_ + superseded_ + buffered(), "message conservation");
  if (!root_) {
    check(leaves_.size() == 1, "no root requires a single leaf");
    return;
  }
  // Walk each level left to right, checking ranges, pivots, sizes, windows.
  struct Item {
    const Node* n;
    bool rightmost;
  };
  std::vector<Item> level{{root_, true}};
  while (!level.empty()) {
    std::vector<Item> next;
    for (auto [n, rightmost] : level) {
      check(n->children.size() == n->pivots.size() + 1, "pivot/child count");
      check(n->children.size() == n->buffers.size(), "buffer/child count");
      std::uint64_t sum = 0;
      Key lo = n->range.lo;
      for (std::size_t j = 0; j < n->children.size(); ++j) {
        const Child& c = n->children[j];
        KeyRange r = c.node ? c.node->range : c.leaf->range;
        check(r.lo == lo, "children ranges partition the node range");
        Key hi_expect = j < n->pivots.size() ? n->pivots[j] : n->range.hi;
        check(r.hi == hi_expect, "pivot matches child range boundary");
        lo = r.hi;
        sum += c.node ? c.node->size_keys : c.leaf->size_keys;
        check(n->buffers[j].size() <= cap_, "buffer within capacity between ops");
        for (const auto& [k, msg] : n->buffers[j].msgs)
          check(r.contains(k), "buffered message routed to its child range");
        if (c.node) {
          check(c.node->parent == n, "child parent link");
          next.push_back({c.node, rightmost && j + 1 == n->children.size()});
        } else {
          check(c.leaf->parent == n, "leaf parent link");
          std::uint64_t t = std::uint64_t(m_->B()) / 2;
          check(c.leaf->size_keys <= 4 * t, "leaf size window upper bound");
          check(c.leaf->size_keys >= t, "leaf size window lower bound");
        }
      }
      check(sum == n->size_keys, "node size equals children sizes");
      if (n != root_) {
        check(n->size_keys <= 4 * n->target_size, "node size window upper bound");
        if (!rightmost) check(n->size_keys >= n->target_size, "node size window lower bound");
      }
    }
    level = std::move(next);
  }
  std::uint64_t leaf_sum = 0;
  for (const auto& l : leaves_) leaf_sum += l->size_keys;
  check(leaf_sum == present_.size(), "leaf sizes account for every present key");
}

machine::CostLedger beps_tree_run(const Trace& trace, std::uint64_t fanout, int block_size_b,
                                  const std::vector<Key>& preload, std::uint64_t cache_threshold,
                                  double speed_limit_k) {
  machine::Machine m(block_size_b, cache_threshold);
  m.ledger().speed_limit_k = speed_limit_k;
  Tree tree(m, fanout);
  tree.bulk_load(preload);
  for (const Op& op : trace) tree.execute(op);
  return m.ledger();
}

}  // namespace bufprop::bpt
