#pragma once

#include <cstddef>
#include <functional>

namespace bitseg {

/// Worker count used by batch-parallel kernels. Defaults to the hardware
/// concurrency; results never depend on this value.
std::size_t num_threads();
void set_num_threads(std::size_t n);

/// Runs body(i) for i in [0, n). Work is partitioned into contiguous blocks by
/// index, so callers that write per-index outputs stay deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

} // namespace bitseg
