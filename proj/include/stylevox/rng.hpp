#pragma once

#include <cstdint>

namespace sv {

// Counter-based RNG: every draw is a pure function of (seed, stream, substream,
// counter), so item k of any sequence is computable without generating items
// 0..k-1. Streams keep independent consumers (data order, latents, noise, ...)
// from colliding on the same underlying sequence.
enum class Stream : uint64_t {
  PhantomItem = 1,
  TrainBatch = 2,
  TrainLatent = 3,
  TrainMixing = 4,
  TrainNoise = 5,
  PathLength = 6,
  ProjInit = 7,
  ProjNoise = 8,
  EvalDraw = 9,
  Generate = 10,
  GenerateNoise = 11,
  WAvg = 12,
  RandProj = 13,
  InitGenerator = 14,
  InitDiscriminator = 15,
  Test = 99,
};

uint64_t splitmix64(uint64_t x);

class CounterRng {
 public:
  CounterRng(uint64_t seed, Stream stream, uint64_t substream = 0);
  CounterRng(uint64_t seed, uint64_t stream, uint64_t substream = 0);

  uint64_t next_u64();
  // uniform in [0, 1)
  double uniform();
  // standard normal via Box-Muller (consumes two draws)
  double normal();
  // uniform integer in [0, n), n >= 1
  uint64_t uniform_int(uint64_t n);

  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace sv
