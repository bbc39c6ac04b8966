#include "af/rng.hpp"

#include <cmath>

namespace af {
namespace {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

std::uint64_t Rng::hash_name(std::string_view name) {
  // FNV-1a, then one scramble round so short names spread out.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

std::uint64_t Rng::bits(std::uint64_t stream, std::uint64_t counter) const {
  return splitmix64(seed_ ^ splitmix64(stream ^ splitmix64(counter)));
}

double Rng::uniform(std::uint64_t stream, std::uint64_t counter) const {
  return static_cast<double>(bits(stream, counter) >> 11) * 0x1.0p-53;
}

double Rng::normal(std::uint64_t stream, std::uint64_t counter) const {
  std::uint64_t b = bits(stream, counter);
  std::uint64_t b2 = splitmix64(b ^ 0xda3e39cb94b95bdbULL);
  // u1 in (0, 1] so the log is finite.
  double u1 = (static_cast<double>(b >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(b2 >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

std::uint64_t Rng::uniform_index(std::uint64_t stream, std::uint64_t counter,
                                 std::uint64_t n) const {
  // Rejection-free multiply-shift; bias is negligible for n << 2^64.
  return static_cast<std::uint64_t>(uniform(stream, counter) * static_cast<double>(n)) % n;
}

}  // namespace af
