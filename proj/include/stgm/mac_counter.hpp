#pragma once

#include <cstdint>

namespace stgm {

// Runtime tally of multiply-accumulates performed by contraction kernels
// (linear maps, matrix products, graph convolutions, scan mixing). Used to
// audit the analytic FLOP counters against what a forward pass actually does.
class MacCounter {
 public:
  MacCounter() : prev_(slot()) { slot() = this; }
  ~MacCounter() { slot() = prev_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t macs() const { return macs_; }

  static void add(std::uint64_t n) {
    if (auto* c = slot()) c->macs_ += n;
  }

 private:
  static MacCounter*& slot() {
    thread_local MacCounter* active = nullptr;
    return active;
  }

  MacCounter* prev_;
  std::uint64_t macs_ = 0;
};

}  // namespace stgm
