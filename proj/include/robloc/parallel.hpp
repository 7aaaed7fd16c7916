#pragma once

// Data-parallel loop helper. Every kernel that uses it keeps a serial path;
// results must not depend on which path ran, so loop bodies only write to
// their own index.

#include <cstddef>
#include <exception>
#include <string_view>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace robloc {

enum class Execution { serial, parallel };

inline std::string_view to_string(Execution e) { return e == Execution::serial ? "serial" : "parallel"; }

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Runs body(i) for i in [0, n). Exceptions thrown by the body are captured
/// per index and the lowest-index one is rethrown after the loop.
template <class Body>
void for_each_index(Execution exec, std::size_t n, Body&& body) {
  if (exec == Execution::serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace robloc
