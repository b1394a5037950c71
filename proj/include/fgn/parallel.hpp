#pragma once

#include <cstddef>
#include <functional>

namespace fgn {

/// Worker count: hardware concurrency, capped by FGN_THREADS when set.
/// Throws std::invalid_argument for a non-positive or non-numeric value.
std::size_t worker_count();

/// Calls fn(begin, end) on disjoint chunks covering [0, n). Exceptions from
/// workers are rethrown (the first one by chunk order).
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace fgn
