#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace af {

// Counter-based generator: every draw is a pure function of
// (seed, stream name, counter), so any experiment replays exactly and
// independent streams never collide.  No global state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  static std::uint64_t hash_name(std::string_view name);

  // Raw 64 mixed bits for (stream, counter).
  std::uint64_t bits(std::uint64_t stream, std::uint64_t counter) const;

  // Uniform on [0, 1).
  double uniform(std::uint64_t stream, std::uint64_t counter) const;

  // Standard normal via Box-Muller; consumes two sub-draws internally but
  // still one (stream, counter) slot.
  double normal(std::uint64_t stream, std::uint64_t counter) const;

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t stream, std::uint64_t counter,
                              std::uint64_t n) const;

 private:
  std::uint64_t seed_;
};

// Stateful cursor over one named stream.  The cursor is the only state and is
// what checkpoints record.
class RngStream {
 public:
  RngStream(const Rng& rng, std::string_view name, std::uint64_t cursor = 0)
      : rng_(rng), stream_(Rng::hash_name(name)), name_(name), cursor_(cursor) {}

  double uniform() { return rng_.uniform(stream_, cursor_++); }
  double normal() { return rng_.normal(stream_, cursor_++); }
  std::uint64_t index(std::uint64_t n) { return rng_.uniform_index(stream_, cursor_++, n); }

  std::uint64_t cursor() const { return cursor_; }
  const std::string& name() const { return name_; }

 private:
  Rng rng_;
  std::uint64_t stream_;
  std::string name_;
  std::uint64_t cursor_;
};

}  // namespace af
