#pragma once

#include <cstdint>

namespace stochca {

/// Operation counts used to audit the cost of each training/inference path.
struct OpCounts {
  std::uint64_t target_attention = 0;  // attention sublayer evaluations, one per sequence per layer
  std::uint64_t frozen_attention = 0;
  std::uint64_t frozen_forwards = 0;   // batched forward passes through a frozen model

  friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

namespace instrument {

/// RAII counting region; nested scopes all observe the same events.
class Scope {
 public:
  Scope() : parent_(current()) { current() = this; }
  ~Scope() { current() = parent_; }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  const OpCounts& counts() const noexcept { return counts_; }

  static void attention(bool frozen, std::uint64_t sequences) {
    for (Scope* s = current(); s; s = s->parent_)
      (frozen ? s->counts_.frozen_attention : s->counts_.target_attention) += sequences;
  }
  static void frozen_forward() {
    for (Scope* s = current(); s; s = s->parent_) ++s->counts_.frozen_forwards;
  }

 private:
  static Scope*& current() {
    thread_local Scope* active = nullptr;
    return active;
  }

  Scope* parent_;
  OpCounts counts_;
};

}  // namespace instrument
}  // namespace stochca
