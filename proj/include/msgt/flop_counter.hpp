#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace msgt {

// Multiply-accumulate instrumentation for the forward kernels.
//
// matmul, linear and conv2d add their MAC count to the active bucket.
// Everything else (softmax, norms, elementwise, bias adds) adds one unit per
// output element to `unmodeled`. Counting is off unless a FlopRecording is
// alive on the current thread.
struct FlopCounter {
  bool enabled = false;
  std::string bucket = "other";
  std::map<std::string, std::uint64_t> macs;
  std::uint64_t unmodeled = 0;

  static FlopCounter& local();

  void add_macs(std::uint64_t n) {
    if (enabled) macs[bucket] += n;
  }
  void add_unmodeled(std::uint64_t n) {
    if (enabled) unmodeled += n;
  }
  std::uint64_t get(const std::string& name) const {
    auto it = macs.find(name);
    return it == macs.end() ? 0 : it->second;
  }
  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& [k, v] : macs) s += v;
    return s;
  }
};

// Enables and resets the thread-local counter for its lifetime.
class FlopRecording {
 public:
  FlopRecording() {
    auto& c = FlopCounter::local();
    previous_ = c.enabled;
    c = FlopCounter{};
    c.enabled = true;
  }
  ~FlopRecording() { FlopCounter::local().enabled = previous_; }
  FlopRecording(const FlopRecording&) = delete;
  FlopRecording& operator=(const FlopRecording&) = delete;

  const FlopCounter& counter() const { return FlopCounter::local(); }

 private:
  bool previous_ = false;
};

// Routes MAC counts to a named bucket for its lifetime.
class FlopScope {
 public:
  explicit FlopScope(std::string bucket) : previous_(FlopCounter::local().bucket) {
    FlopCounter::local().bucket = std::move(bucket);
  }
  ~FlopScope() { FlopCounter::local().bucket = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  std::string previous_;
};

}  // namespace msgt
