#pragma once

#include <cstddef>
#include <functional>

namespace tbloc {

// Calls fn(i) for i in [0, n) on up to `threads` workers. Index i always lands
// in the same result slot, so output does not depend on the thread count.
// The first exception thrown by any call is rethrown after all workers join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace tbloc
