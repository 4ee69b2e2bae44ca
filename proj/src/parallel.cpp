#include "hte/parallel.hpp"

#include <atomic>

namespace hte {

namespace {
std::atomic<unsigned> g_threads{0};
}  // namespace

void set_thread_count(unsigned threads) { g_threads.store(threads); }

unsigned thread_count() {
  const unsigned configured = g_threads.load();
  if (configured > 0) return configured;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

}  // namespace hte
