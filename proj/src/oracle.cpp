#include "bufprop/oracle.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "bufprop/bpt.hpp"
#include "bufprop/check.hpp"

namespace bufprop::oracle {

using cost::Scaled;
namespace {
constexpr Scaled kInf = std::numeric_limits<Scaled>::max() / 4;
}

OpProfile build_profile(const std::vector<Key>& preload, const Trace& trace) {
  std::set<Key> keys(preload.begin(), preload.end());
  for (const Op& op : trace)
    if (op.is_write()) keys.insert(op.key);
  if (keys.empty())
    for (const Op& op : trace) keys.insert(op.key);

  OpProfile p;
  p.universe.assign(keys.begin(), keys.end());
  p.q.assign(p.universe.size(), 0);
  p.w.assign(p.universe.size(), 0);
  auto position = [&](Key k) -> std::size_t {
    auto it = std::lower_bound(p.universe.begin(), p.universe.end(), k);
    if (it == p.universe.end()) return p.universe.size() - 1;
    return std::size_t(it - p.universe.begin());
  };
  for (const Op& op : trace) {
    if (p.universe.empty()) break;
    if (op.is_write()) {
      p.w[position(op.key)]++;
      p.total_w++;
    } else {
      p.q[position(op.key)]++;
      p.total_q++;
    }
  }
  return p;
}

FixedFanoutChoice best_fixed_fanout(const OpProfile& p, std::uint64_t lambda, std::uint64_t b) {
  check(lambda >= 1, "best_fixed_fanout: lambda must be >= 1");
  cost::FanoutChoice c = cost::best_fanout(b, lambda, p.total_q, p.total_w);
  return {c.fanout, c.cost_scaled, double(c.cost_scaled) / double(b)};
}

// ---------------------------------------------------------------------------
// Interval DP for the optimal static tree.
//
// Size classes are s_j = (B/2) * 2^j. Class 0 is the leaf class; an internal
// node of class j picks a power-of-two fanout f <= 2^j and partitions its
// interval into class-(j - log2 f) children. All costs are scaled by B.
namespace {

struct Dp {
  const OpProfile& p;
  std::uint64_t b;
  std::size_t n;
  std::vector<std::uint64_t> pq, pw;  // prefix sums
  std::vector<std::uint64_t> cls;     // s_j per class index
  // memo[(a, len, j)] -> (cost, fanout choice), hashed on a packed key
  std::unordered_map<std::uint64_t, std::pair<Scaled, std::uint32_t>> memo;
  // chain[a * #classes + j] -> E: E[x] = min partition cost of [a, a+x)
  std::unordered_map<std::uint64_t, std::vector<Scaled>> chains;

  std::uint64_t pack(std::uint32_t a, std::uint32_t len, std::uint32_t j) const {
    return (std::uint64_t(a) << 32) | (std::uint64_t(len) << 8) | j;
  }

  explicit Dp(const OpProfile& prof, std::uint64_t bb) : p(prof), b(bb) {
    n = p.universe.size();
    pq.assign(n + 1, 0);
    pw.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
      pq[i + 1] = pq[i] + p.q[i];
      pw[i + 1] = pw[i] + p.w[i];
    }
    for (std::uint64_t s = b / 2; s <= std::max<std::uint64_t>(1, n); s *= 2) cls.push_back(s);
    if (cls.empty()) cls.push_back(b / 2);
  }

  std::uint64_t q_range(std::uint32_t a, std::uint32_t len) const { return pq[a + len] - pq[a]; }
  std::uint64_t w_range(std::uint32_t a, std::uint32_t len) const { return pw[a + len] - pw[a]; }

  Scaled leaf_cost(std::uint32_t a, std::uint32_t len) const {
    return Scaled(b) * Scaled(q_range(a, len));
  }

  bool in_window(std::uint64_t len, std::uint32_t j) const {
    return len >= cls[j] && len < 4 * cls[j];
  }

  Scaled chain_at(std::uint32_t a, std::uint32_t len, std::uint32_t j) {
    auto& e = chains[std::uint64_t(a) * cls.size() + j];
    if (e.empty()) e.push_back(0);
    while (e.size() <= len) {
      std::uint32_t x = std::uint32_t(e.size());
      Scaled best = kInf;
      std::uint64_t lo = cls[j], hi = std::min<std::uint64_t>(4 * cls[j] - 1, x);
      for (std::uint64_t l = lo; l <= hi; ++l) {
        Scaled prefix = e[x - l];
        if (prefix >= kInf) continue;
        Scaled sub = cost_at(a + x - std::uint32_t(l), std::uint32_t(l), j);
        if (sub >= kInf) continue;
        best = std::min(best, prefix + sub);
      }
      e.push_back(best);
    }
    return e[len];
  }

  Scaled cost_at(std::uint32_t a, std::uint32_t len, std::uint32_t j) {
    if (!in_window(len, j)) return kInf;
    if (j == 0) return leaf_cost(a, len);
    std::uint64_t key = pack(a, len, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second.first;
    memo[key] = {kInf, 0};  // guard against re-entry
    Scaled best = kInf;
    std::uint32_t best_f = 0;
    for (std::uint32_t lg = 1; lg <= j && (1u << lg) <= b; ++lg) {
      std::uint32_t f = 1u << lg;
      Scaled chain = chain_at(a, len, j - lg);
      if (chain >= kInf) continue;
      Scaled node = Scaled(b) * Scaled(q_range(a, len)) + 2 * Scaled(f) * Scaled(w_range(a, len));
      Scaled total = node + chain;
      if (total <= best) {  // ties toward larger f
        best = total;
        best_f = f;
      }
    }
    memo[key] = {best, best_f};
    return best;
  }

  StaticPlan reconstruct(std::uint32_t a, std::uint32_t len, std::uint32_t j, Key lo, Key hi) {
    StaticPlan plan;
    plan.range = {lo, hi};
    plan.size = len;
    Scaled total = cost_at(a, len, j);
    plan.total_cost_scaled = total;
    plan.total_cost = double(total) / double(b);
    if (j == 0) {
      plan.fanout = 0;
      plan.node_cost = double(leaf_cost(a, len)) / double(b);
      return plan;
    }
    std::uint32_t f = memo.at(pack(a, len, j)).second;
    check(f != 0, "static plan reconstruction without a fanout choice");
    plan.fanout = f;
    std::uint32_t jc = j - std::uint32_t(cost::log2_exact(f));
    plan.node_cost =
        double(Scaled(b) * Scaled(q_range(a, len)) + 2 * Scaled(f) * Scaled(w_range(a, len))) /
        double(b);
    // Backtrack the chain for the chosen child class.
    auto& e = chains.at(std::uint64_t(a) * cls.size() + jc);
    std::uint32_t x = len;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> parts;  // (start, len) right-to-left
    while (x > 0) {
      bool found = false;
      std::uint64_t lo_l = cls[jc], hi_l = std::min<std::uint64_t>(4 * cls[jc] - 1, x);
      for (std::uint64_t l = lo_l; l <= hi_l && !found; ++l) {
        Scaled prefix = e[x - l];
        if (prefix >= kInf) continue;
        Scaled sub = cost_at(a + x - std::uint32_t(l), std::uint32_t(l), jc);
        if (sub >= kInf) continue;
        if (prefix + sub == e[x]) {
          parts.push_back({a + x - std::uint32_t(l), std::uint32_t(l)});
          x -= std::uint32_t(l);
          found = true;
        }
      }
      check(found, "static plan chain backtrack failed");
    }
    std::reverse(parts.begin(), parts.end());
    Key child_lo = lo;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto [ca, cl] = parts[i];
      Key child_hi = i + 1 == parts.size() ? hi : p.universe[ca + cl - 1];
      plan.children.push_back(reconstruct(ca, cl, jc, child_lo, child_hi));
      if (i + 1 < parts.size()) plan.pivots.push_back(child_hi);
      child_lo = child_hi;
    }
    return plan;
  }
};

}  // namespace

StaticPlan optimal_static_tree(const OpProfile& p, std::uint64_t b, std::size_t max_keys) {
  std::size_t n = p.universe.size();
  if (n > max_keys)
    throw std::invalid_argument("optimal_static_tree: universe exceeds max_keys (" +
                                std::to_string(n) + " > " + std::to_string(max_keys) + ")");
  StaticPlan plan;
  if (n == 0) {
    plan.range = KeyRange::all();
    return plan;
  }
  Dp dp(p, b);
  Key lo = KeyRange::all().lo, hi = KeyRange::all().hi;

  Scaled best = kInf;
  std::int32_t best_j = -1;
  // The root is exempt from the lower size window: a tiny universe may sit in
  // a single leaf.
  if (n < 4 * dp.cls[0]) {
    best = dp.leaf_cost(0, std::uint32_t(n));
    best_j = 0;
  }
  for (std::uint32_t j = 1; j < dp.cls.size(); ++j) {
    if (!dp.in_window(n, j)) continue;
    Scaled c = dp.cost_at(0, std::uint32_t(n), j);
    if (c < best) {
      best = c;
      best_j = std::int32_t(j);
    }
  }
  check(best < kInf, "no valid static tree for this universe");
  if (best_j == 0) {
    plan.range = {lo, hi};
    plan.size = n;
    plan.fanout = 0;
    plan.total_cost_scaled = best;
    plan.total_cost = double(best) / double(b);
    plan.node_cost = plan.total_cost;
    return plan;
  }
  return dp.reconstruct(0, std::uint32_t(n), std::uint32_t(best_j), lo, hi);
}

// ---------------------------------------------------------------------------
// Independent brute force: plain recursion over every composition, no memo.
namespace {

struct Brute {
  const OpProfile& p;
  std::uint64_t b;
  std::vector<std::uint64_t> pq, pw;
  std::vector<std::uint64_t> cls;

  Brute(const OpProfile& prof, std::uint64_t bb) : p(prof), b(bb) {
    std::size_t n = p.universe.size();
    pq.assign(n + 1, 0);
    pw.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
      pq[i + 1] = pq[i] + p.q[i];
      pw[i + 1] = pw[i] + p.w[i];
    }
    for (std::uint64_t s = b / 2; s <= std::max<std::uint64_t>(1, n); s *= 2) cls.push_back(s);
    if (cls.empty()) cls.push_back(b / 2);
  }

  Scaled tree_cost(std::size_t a, std::size_t len, std::size_t j) {
    if (len < cls[j] || len >= 4 * cls[j]) return kInf;
    Scaled q = Scaled(b) * Scaled(pq[a + len] - pq[a]);
    if (j == 0) return q;
    Scaled best = kInf;
    for (std::size_t lg = 1; lg <= j && (1ull << lg) <= b; ++lg) {
      std::uint64_t f = 1ull << lg;
      Scaled node = q + 2 * Scaled(f) * Scaled(pw[a + len] - pw[a]);
      Scaled chain = chain_cost(a, len, j - lg);
      if (chain < kInf) best = std::min(best, node + chain);
    }
    return best;
  }

  Scaled chain_cost(std::size_t a, std::size_t len, std::size_t j) {
    if (len == 0) return kInf;
    Scaled best = kInf;
    for (std::uint64_t l = cls[j]; l < 4 * cls[j] && l <= len; ++l) {
      Scaled first = tree_cost(a, l, j);
      if (first >= kInf) continue;
      if (l == len) {
        best = std::min(best, first);
      } else {
        Scaled rest = chain_cost(a + l, len - l, j);
        if (rest < kInf) best = std::min(best, first + rest);
      }
    }
    return best;
  }
};

}  // namespace

cost::Scaled static_tree_bruteforce_cost(const OpProfile& p, std::uint64_t b,
                                         std::size_t max_keys) {
  std::size_t n = p.universe.size();
  check(n <= max_keys, "static_tree_bruteforce_cost: universe too large");
  if (n == 0) return 0;
  Brute br(p, b);
  Scaled best = kInf;
  if (n < 4 * br.cls[0]) best = Scaled(b) * Scaled(br.pq[n]);
  for (std::size_t j = 1; j < br.cls.size(); ++j) best = std::min(best, br.tree_cost(0, n, j));
  return best;
}

EqualFanoutResult equal_fanout_bruteforce(int levels, std::uint64_t leaf_budget, std::uint64_t r,
                                          std::uint64_t w, std::uint64_t b) {
  check(levels >= 1 && levels <= 4, "equal_fanout_bruteforce: levels must be in [1,4]");
  check(leaf_budget <= 256 && cost::is_pow2(leaf_budget), "leaf_budget must be a power of two <= 256");
  int total_exp = cost::log2_exact(leaf_budget);
  check(total_exp >= levels, "leaf_budget must admit `levels` factors >= 2");

  EqualFanoutResult best;
  auto spread = [](const std::vector<int>& e) {
    auto [mn, mx] = std::minmax_element(e.begin(), e.end());
    return *mx - *mn;
  };
  // Enumerate compositions of total_exp into `levels` parts >= 1.
  std::vector<int> cur(levels, 1);
  bool have = false;
  std::function<void(int, int)> rec = [&](int idx, int remaining) {
    if (idx == levels - 1) {
      if (remaining < 1) return;
      cur[idx] = remaining;
      Scaled c = 0;
      for (int e : cur) c += Scaled(b) * Scaled(r) + 2 * Scaled(w) * Scaled(1ull << e);
      bool better = false;
      if (!have || c < best.cost_scaled) {
        better = true;
      } else if (c == best.cost_scaled) {
        std::vector<int> best_exps;
        for (auto f : best.fanouts) best_exps.push_back(cost::log2_exact(f));
        if (spread(cur) < spread(best_exps) ||
            (spread(cur) == spread(best_exps) && cur < best_exps))
          better = true;
      }
      if (better) {
        have = true;
        best.cost_scaled = c;
        best.fanouts.clear();
        for (int e : cur) best.fanouts.push_back(1ull << e);
        best.minimizer_is_most_equal = spread(cur) <= 1;
      }
      return;
    }
    for (int e = 1; e + (levels - idx - 1) <= remaining; ++e) {
      cur[idx] = e;
      rec(idx + 1, remaining - e);
    }
  };
  rec(0, total_exp);
  check(have, "no fanout vector enumerated");
  check(best.minimizer_is_most_equal, "equal-fanout minimizer must be the most-equal vector");
  return best;
}

std::vector<std::optional<Word>> semantic_oracle(const std::vector<Key>& preload,
                                                 const Trace& trace) {
  std::map<Key, Word> state;
  for (Key k : preload) state[k] = 0;
  std::vector<std::optional<Word>> answers;
  for (const Op& op : trace) {
    if (op.is_write()) {
      state[op.key] = op.val;
    } else {
      auto it = state.find(op.key);
      answers.push_back(it == state.end() ? std::nullopt : std::optional<Word>(it->second));
    }
  }
  return answers;
}

// ---------------------------------------------------------------------------
// Physical replay of a StaticPlan.
namespace {

struct PlanSim {
  struct PNode {
    machine::BlockId block;
    std::vector<Key> pivots;
    std::vector<int> children;  // index into nodes (>=0) or ~leaf_index (<0)
    std::vector<bpt::Buffer> buffers;
    std::uint64_t cap = 1;
  };
  struct PLeaf {
    machine::BlockId block;
    std::map<Key, Word> data;
  };

  machine::Machine& m;
  std::vector<PNode> nodes;
  std::vector<PLeaf> leaves;
  int root = -1;

  explicit PlanSim(machine::Machine& mm) : m(mm) {}

  int build(const StaticPlan& plan) {
    if (plan.is_leaf()) {
      leaves.push_back({m.store.allocate(machine::Payload{}), {}});
      return ~int(leaves.size() - 1);
    }
    PNode node;
    node.block = m.store.allocate(machine::Payload{});
    node.pivots = plan.pivots;
    node.cap = std::max<std::uint64_t>(1, std::uint64_t(m.B()) / plan.fanout);
    int id = int(nodes.size());
    nodes.push_back(std::move(node));
    std::vector<int> kids;
    for (const StaticPlan& c : plan.children) kids.push_back(build(c));
    nodes[id].children = kids;
    nodes[id].buffers.resize(kids.size());
    return id;
  }

  void preload_keys(const StaticPlan& plan, const std::vector<Key>& keys) {
    for (Key k : keys) leaf_for(plan, k).data[k] = 0;
  }

  PLeaf& leaf_for(const StaticPlan& plan, Key k) {
    const StaticPlan* p = &plan;
    int id = root;
    while (id >= 0) {
      int j = bpt::route_index(nodes[id].pivots, k);
      id = nodes[id].children[j];
      p = &p->children[j];
    }
    (void)p;
    return leaves[~id];
  }

  std::optional<Word> query(Key k) {
    int id = root;
    while (id >= 0) {
      PNode& n = nodes[id];
      machine::read_block(m.store, m.cache, n.block, machine::IoCategory::Search);
      int j = bpt::route_index(n.pivots, k);
      if (const Message* msg = n.buffers[j].find(k)) return msg->val;
      id = n.children[j];
    }
    PLeaf& l = leaves[~id];
    machine::read_block(m.store, m.cache, l.block, machine::IoCategory::Search);
    auto it = l.data.find(k);
    return it == l.data.end() ? std::nullopt : std::optional<Word>(it->second);
  }

  void flush(int id, std::size_t j) {
    PNode& n = nodes[id];
    bpt::Buffer buf = std::move(n.buffers[j]);
    n.buffers[j] = bpt::Buffer{};
    if (buf.empty()) return;
    std::uint64_t batches = bpt::flush_batches(buf.size(), n.cap);
    int child = n.children[j];
    machine::BlockId cb = child >= 0 ? nodes[child].block : leaves[~child].block;
    for (std::uint64_t i = 0; i < batches; ++i) {
      machine::read_block(m.store, m.cache, cb, machine::IoCategory::Flush);
      machine::write_block(m.store, m.cache, cb, machine::Payload{}, machine::IoCategory::Flush);
    }
    if (child < 0) {
      for (auto& [k, msg] : buf.msgs) leaves[~child].data[k] = msg.val;
      return;
    }
    PNode& c = nodes[child];
    for (auto& [k, msg] : buf.msgs) c.buffers[bpt::route_index(c.pivots, k)].add(msg);
    for (std::size_t jj = 0; jj < c.buffers.size(); ++jj)
      if (c.buffers[jj].size() > c.cap) flush(child, jj);
  }

  void write(Key k, Word v, std::uint64_t seq) {
    if (root < 0) {
      leaves[~root].data[k] = v;
      return;
    }
    PNode& n = nodes[root];
    int j = bpt::route_index(n.pivots, k);
    n.buffers[j].add({k, v, seq});
    if (n.buffers[j].size() > n.cap) flush(root, j);
  }
};

}  // namespace

machine::CostLedger simulate_static_plan(const StaticPlan& plan, const std::vector<Key>& preload,
                                         const Trace& trace, int block_size_b,
                                         std::uint64_t cache_threshold) {
  machine::Machine m(block_size_b, cache_threshold);
  PlanSim sim(m);
  sim.root = sim.build(plan);
  sim.preload_keys(plan, preload);
  std::uint64_t seq = 1;
  for (const Op& op : trace) {
    if (op.is_write())
      sim.write(op.key, op.val, seq++);
    else
      sim.query(op.key);
  }
  return m.ledger();
}

}  // namespace bufprop::oracle
