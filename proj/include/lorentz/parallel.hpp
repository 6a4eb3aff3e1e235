#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace lorentz {

/// Runs fn(begin, end) over fixed-size blocks of [0, n) and returns the per-block
/// results in block order. Block boundaries do not depend on the thread count, so
/// any reduction done in block order is reproducible for every `threads` value.
template <class Fn>
auto parallel_blocks(std::size_t n, std::size_t block, unsigned threads, Fn fn) {
  using R = decltype(fn(std::size_t{0}, std::size_t{0}));
  const std::size_t nblocks = n == 0 ? 0 : (n + block - 1) / block;
  std::vector<R> out(nblocks);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(nblocks, 1))));
  auto run = [&](unsigned tid, std::exception_ptr& err) {
    try {
      for (std::size_t b = tid; b < nblocks; b += threads)
        out[b] = fn(b * block, std::min(n, (b + 1) * block));
    } catch (...) {
      err = std::current_exception();
    }
  };
  std::vector<std::exception_ptr> errs(threads);
  if (threads == 1) {
    run(0, errs[0]);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(run, t, std::ref(errs[t]));
    for (auto& th : pool) th.join();
  }
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace lorentz
