#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace segreg {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Seed of the named stream (run_seed, purpose, index). Streams with distinct
// purposes or indices are statistically independent, so adding a new consumer
// never shifts the draws seen by existing ones.
constexpr std::uint64_t stream_seed(std::uint64_t run_seed, std::string_view purpose,
                                    std::uint64_t index = 0) {
  std::uint64_t s = detail::splitmix64(run_seed);
  s = detail::splitmix64(s ^ detail::fnv1a(purpose));
  return detail::splitmix64(s ^ detail::splitmix64(index + 0x632be59bd9b4e019ULL));
}

inline Rng make_stream(std::uint64_t run_seed, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(stream_seed(run_seed, purpose, index));
}

}  // namespace segreg
