#ifndef VOLAGE_PARALLEL_HPP
#define VOLAGE_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace volage {

/// Worker count from VOLAGE_THREADS (default: hardware concurrency, min 1).
std::size_t thread_count();

/// Overrides the worker count for this process; 0 restores the environment default.
void set_thread_count(std::size_t n);

/// Runs body(i) for i in [0, n). Callers only hand in bodies that write disjoint
/// outputs, so the result is independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace volage

#endif  // VOLAGE_PARALLEL_HPP
