#pragma once

#include <stdexcept>
#include <string>

namespace bufprop {

// Internal invariant check; active in all build types.
struct InvariantFailure : std::logic_error {
  using std::logic_error::logic_error;
};

inline void check(bool cond, const char* what) {
  if (!cond) throw InvariantFailure(std::string("invariant violated: ") + what);
}

}  // namespace bufprop
