#include "vem/parallel.hpp"

#include <atomic>

namespace vem {

namespace {
std::atomic<int> g_threads{1};
}

int num_threads() { return g_threads.load(); }

void set_num_threads(int threads) { g_threads.store(std::max(1, threads)); }

}  // namespace vem
