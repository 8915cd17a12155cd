// Keys, operations, and in-flight messages shared by every tree variant.
#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "bufprop/machine.hpp"

namespace bufprop {

using Key = std::int64_t;
using Word = machine::Word;

enum class OpKind { Query, Insert, Update };

struct Op {
  OpKind kind = OpKind::Query;
  Key key = 0;
  Word val = 0;  // meaningful for Insert/Update only

  static Op query(Key k) { return {OpKind::Query, k, 0}; }
  static Op insert(Key k, Word v) { return {OpKind::Insert, k, v}; }
  static Op update(Key k, Word v) { return {OpKind::Update, k, v}; }
  bool is_write() const { return kind != OpKind::Query; }
};

using Trace = std::vector<Op>;

// An insert/update in transit down buffers. seq increases in arrival order at
// the root; a later message for the same key supersedes an earlier one.
struct Message {
  Key key = 0;
  Word val = 0;
  std::uint64_t seq = 0;
};

// Half-open-below key interval (lo, hi], matching the right-closed pivot
// convention: child j of a node owns (p_{j-1}, p_j].
struct KeyRange {
  Key lo = std::numeric_limits<Key>::min();  // exclusive
  Key hi = std::numeric_limits<Key>::max();  // inclusive

  static KeyRange all() { return {}; }
  bool contains(Key k) const { return lo < k && k <= hi; }
  friend bool operator==(const KeyRange& a, const KeyRange& b) {
    return a.lo == b.lo && a.hi == b.hi;
  }
};

}  // namespace bufprop
