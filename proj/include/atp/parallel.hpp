// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace atp {

/// Worker count from ATP_NUM_WORKERS, else the hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n). Work is split across worker_count() threads;
/// callers must write results to per-index slots so the outcome does not
/// depend on the split. The first exception thrown by any task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace atp
