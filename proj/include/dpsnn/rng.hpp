#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace dpsnn {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream purposes. Each (purpose, round, client, step) tuple gets its own generator, so the
/// order in which clients or draws are scheduled never changes what they observe.
enum class Stream : std::uint64_t {
  init = 1,
  partition = 2,
  batching = 3,
  dp_noise = 4,
  data = 5,
  monte_carlo = 6,
  probe = 7,
};

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(master);
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_stream(std::uint64_t master, Stream purpose, std::uint64_t a = 0, std::uint64_t b = 0,
                       std::uint64_t c = 0) {
  return Rng(derive_seed(master, {static_cast<std::uint64_t>(purpose), a, b, c}));
}

}  // namespace dpsnn
