#pragma once

#include <cstddef>
#include <functional>

namespace hypa {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index must be an
// independent unit of work writing only to its own output slot; results are
// then identical for any job count. The first exception thrown by a worker is
// rethrown on the calling thread after all workers join.
void parallel_for(std::size_t n, int jobs,
                  const std::function<void(std::size_t)>& fn);

}  // namespace hypa
