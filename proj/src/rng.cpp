#include "stylevox/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace sv {

namespace {
constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

uint64_t splitmix64(uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

CounterRng::CounterRng(uint64_t seed, Stream stream, uint64_t substream)
    : CounterRng(seed, static_cast<uint64_t>(stream), substream) {}

CounterRng::CounterRng(uint64_t seed, uint64_t stream, uint64_t substream) {
  key_ = splitmix64(seed + kGolden) ^ splitmix64(stream * 0xda942042e4dd58b5ull + 1) ^
         splitmix64(substream * 0xe7037ed1a0b428dbull + 2);
}

uint64_t CounterRng::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * kGolden);
}

double CounterRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::normal() {
  // u1 in (0, 1] so the log is finite.
  double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

uint64_t CounterRng::uniform_int(uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: n must be >= 1");
  // Modulo bias is < 2^-40 for any n used here; determinism is what matters.
  return next_u64() % n;
}

}  // namespace sv
