#pragma once

#include <cstdint>
#include <random>

namespace dann {

using Rng = std::mt19937_64;

/// Named sub-streams derived from a single run seed, so that e.g. dropout
/// masks never perturb the batch order.
enum class Stream : std::uint64_t {
  kInit = 1,
  kSampling = 2,
  kShuffle = 3,
  kCriticShuffle = 4,
  kDropout = 5,
  kCriticDropout = 6,
  kReport = 7,
  kSynth = 8,
  kAdversarialShuffle = 9,
  kAdversarialDropout = 10,
  kTargetShuffle = 11,
  kCriticSourceShuffle = 12,
};

inline std::uint64_t sub_seed(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline Rng make_rng(std::uint64_t seed, Stream stream) {
  return Rng(sub_seed(seed, stream));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace dann
