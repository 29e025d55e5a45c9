#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace dynconn::rng {

using Engine = std::mt19937_64;

/// Top-level sub-streams split from a single root seed.
enum class Purpose : std::uint64_t {
  simulation = 0x51u,
  surrogates = 0x52u,
  smc = 0x53u,
  chains = 0x54u,
  prior = 0x55u,
  posterior_draws = 0x56u,
  experiment = 0x57u,
};

/// SplitMix64 finalizer.
constexpr std::uint64_t mix(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Counter-based seed derivation: the seed for a stream is a hash of the root
/// seed and a path of counters (purpose, chain, stage, particle, ...). Any
/// stream can be recreated without replaying its siblings.
constexpr std::uint64_t derive(std::uint64_t root,
                               std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t h = mix(root);
  for (std::uint64_t p : path) {
    h = mix(h ^ mix(p + 0x632BE59BD9B4E019ull));
  }
  return h;
}

constexpr std::uint64_t tag(Purpose p) noexcept { return static_cast<std::uint64_t>(p); }

inline Engine make_engine(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  return Engine(derive(root, path));
}

/// FNV-1a; stable across platforms, unlike std::hash.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace dynconn::rng
