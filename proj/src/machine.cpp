#include "bufprop/machine.hpp"

namespace bufprop::machine {

const char* to_string(IoCategory c) {
  switch (c) {
    case IoCategory::Search: return "search";
    case IoCategory::Flush: return "flush";
    case IoCategory::Rebuild: return "rebuild";
    case IoCategory::Split: return "split";
  }
  return "?";
}

std::uint64_t CostLedger::by_category(IoCategory c) const {
  switch (c) {
    case IoCategory::Search: return search_io;
    case IoCategory::Flush: return flush_io;
    case IoCategory::Rebuild: return rebuild_io;
    case IoCategory::Split: return split_io;
  }
  return 0;
}

void BlockStore::charge(IoCategory c, std::uint64_t n) {
  if (n == 0) return;
  switch (c) {
    case IoCategory::Search: ledger_.search_io += n; break;
    case IoCategory::Flush: ledger_.flush_io += n; break;
    case IoCategory::Rebuild: ledger_.rebuild_io += n; break;
    case IoCategory::Split: ledger_.split_io += n; break;
  }
  for (IoListener* l : listeners_) (*l)(c, n);
}

const Payload& read_block(BlockStore& store, const Cache& cache, BlockId id,
                          IoCategory category) {
  auto it = store.blocks_.find(id.v);
  if (it == store.blocks_.end())
    throw SimulationFault("read of unknown block " + std::to_string(id.v));
  if (!cache.is_pinned(id)) store.charge(category, 1);
  return it->second;
}

void write_block(BlockStore& store, const Cache& cache, BlockId id, Payload payload,
                 IoCategory category) {
  store.check_fits(payload);
  auto it = store.blocks_.find(id.v);
  if (it == store.blocks_.end())
    throw SimulationFault("write to unknown block " + std::to_string(id.v));
  if (!cache.is_pinned(id)) store.charge(category, 1);
  it->second = std::move(payload);
}

void charge_rebuild(CostLedger& ledger, std::uint64_t blocks_touched) {
  ledger.rebuild_io += blocks_touched;
}

}  // namespace bufprop::machine
