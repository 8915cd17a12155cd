#include "bufprop/fct.hpp"

#include "bufprop/check.hpp"

namespace bufprop::fct {

Controller::Decision Controller::after_op(OpKind kind) {
  if (kind == OpKind::Query)
    st_.queries++;
  else
    st_.writes++;

  Decision d;
  std::uint64_t prev_selected = st_.selected_fanout;
  std::uint64_t s = select_fanout(b_, st_);
  check(s <= prev_selected, "fanout selection must be non-increasing within an epoch");
  st_.selected_fanout = s;
  if (st_.physical_fanout < cost::pow2_sqrt(prev_selected)) st_.sqrt_lag_ops++;

  if (st_.writes > st_.keys_at_epoch_start || st_.queries > st_.leaves_at_epoch_start) {
    d.restart = true;
    return d;
  }
  if (s * 2 <= st_.physical_fanout) d.rebuild_to = std::max<std::uint64_t>(2, cost::pow2_sqrt(s));
  return d;
}

FctTree::FctTree(machine::Machine& m, bpt::CostPolicy policy)
    : m_(&m), tree_(m, std::uint64_t(m.B()), policy), ctl_(std::uint64_t(m.B())) {}

void FctTree::bulk_load(const std::vector<Key>& sorted_keys) {
  tree_.bulk_load(sorted_keys);
  ctl_.start_epoch(tree_.leaf_count(), tree_.key_count());
}

void FctTree::finish_epoch(std::uint64_t converged_fanout) {
  const FctState& st = ctl_.state();
  history_.push_back({st.epoch, st.leaves_at_epoch_start, st.keys_at_epoch_start, st.queries,
                      st.writes, converged_fanout, st.rebuild_io_this_epoch});
}

void FctTree::execute(const Op& op, std::optional<Word>* answer) {
  tree_.execute(op, answer);
  Controller::Decision d = ctl_.after_op(op.kind);
  if (d.restart) {
    // Back to fanout B from scratch; the closing rebuild is billed to the
    // epoch that forced it.
    std::uint64_t converged = tree_.fanout();
    std::uint64_t charged = tree_.rebuild_internal(std::uint64_t(m_->B()));
    ctl_.note_rebuilt(std::uint64_t(m_->B()), charged);
    finish_epoch(converged);
    ctl_.start_epoch(tree_.leaf_count(), tree_.key_count());
    return;
  }
  if (d.rebuild_to != 0 && d.rebuild_to != tree_.fanout()) {
    std::uint64_t charged = tree_.rebuild_internal(d.rebuild_to);
    ctl_.note_rebuilt(d.rebuild_to, charged);
  }
}

FctRunResult fct_tree_run(const Trace& trace, int block_size_b, const std::vector<Key>& preload,
                          std::uint64_t cache_threshold, double speed_limit_k) {
  machine::Machine m(block_size_b, cache_threshold);
  m.ledger().speed_limit_k = speed_limit_k;
  FctTree tree(m);
  tree.bulk_load(preload);
  for (const Op& op : trace) tree.execute(op);
  FctRunResult res;
  res.ledger = m.ledger();
  res.epochs = tree.epoch_history();
  res.final_state = tree.state();
  return res;
}

}  // namespace bufprop::fct
