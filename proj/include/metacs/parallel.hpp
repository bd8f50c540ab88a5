#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

#include "metacs/core.hpp"

namespace metacs {

/// Runs fn(i) for i in [0, count) on up to `threads` workers (static
/// striping). Callers write results into per-index slots and reduce in index
/// order afterwards, so results do not depend on scheduling. The first
/// exception (lowest index) is rethrown.
template <class Fn>
void parallel_for(Index count, int threads, Fn&& fn) {
  const int workers = static_cast<int>(std::clamp<Index>(threads, 1, std::max<Index>(count, 1)));
  if (workers == 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (Index i = w; i < count; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace metacs
