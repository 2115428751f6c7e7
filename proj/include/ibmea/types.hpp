#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ibmea {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using EntityPair = std::pair<int, int>;

// Errors. The CLI maps these onto its exit codes.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Modality : int { Graph = 0, Visual = 1, Attribute = 2, Relation = 3 };

inline constexpr std::array<Modality, 4> kModalities = {Modality::Graph, Modality::Visual,
                                                        Modality::Attribute, Modality::Relation};
inline constexpr int kNumModalities = 4;

constexpr int index_of(Modality m) { return static_cast<int>(m); }

constexpr std::string_view short_name(Modality m) {
  switch (m) {
    case Modality::Graph: return "g";
    case Modality::Visual: return "v";
    case Modality::Attribute: return "a";
    case Modality::Relation: return "r";
  }
  return "?";
}

constexpr std::string_view long_name(Modality m) {
  switch (m) {
    case Modality::Graph: return "graph";
    case Modality::Visual: return "image";
    case Modality::Attribute: return "attribute";
    case Modality::Relation: return "relation";
  }
  return "?";
}

/// Per-modality value table indexed by Modality.
template <typename T>
struct PerModality {
  std::array<T, kNumModalities> values{};

  T& operator[](Modality m) { return values[index_of(m)]; }
  const T& operator[](Modality m) const { return values[index_of(m)]; }
};

}  // namespace ibmea
