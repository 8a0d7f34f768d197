#pragma once

#include <cstddef>
#include <functional>

namespace visteer {

inline constexpr const char* kWorkersEnv = "VISTEER_WORKERS";

// Worker threads from VISTEER_WORKERS (default 1). Bad values fall back to 1.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. The first
// exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace visteer
