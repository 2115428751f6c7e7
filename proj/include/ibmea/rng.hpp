#pragma once

#include "ibmea/types.hpp"

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace ibmea {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of a named substream ("data", "init", "sampling", "negatives", ...) of a run seed.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
  return Rng(substream_seed(seed, stream));
}

template <typename Scalar = double>
MatrixT<Scalar> randn(Index rows, Index cols, Rng& rng, Scalar stddev = Scalar(1)) {
  std::normal_distribution<Scalar> normal(Scalar(0), stddev);
  MatrixT<Scalar> out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

inline std::string serialize_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng deserialize_rng(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw ValidationError("invalid rng state");
  return rng;
}

}  // namespace ibmea
