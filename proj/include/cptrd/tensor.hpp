#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

namespace cptrd {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using TokenId = int;
using Rng = std::mt19937_64;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t position)
      : std::runtime_error(what + " (at byte " + std::to_string(position) + ")"),
        position_(position) {}
  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t position_;
};

// Fills `m` with uniform(lo, hi) draws in row-major order.
template <typename Derived>
void fill_uniform(Eigen::MatrixBase<Derived>& m, Rng& rng, Scalar lo, Scalar hi) {
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
}

// Rounds every entry to the nearest float32 value.
template <typename Derived>
void round_to_float(Eigen::MatrixBase<Derived>& m) {
  m = m.template cast<float>().template cast<Scalar>();
}

// 64-bit FNV-1a over raw bytes; used for parameter digests.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  template <typename Derived>
  void update(const Eigen::DenseBase<Derived>& m) {
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    update(shape, sizeof(shape));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const Scalar v = m(r, c);
        update(&v, sizeof(v));
      }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string hex_digest(std::uint64_t value);

// Derives an independent seed from a base seed and a list of stream tags.
inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = seed ^ 0x243f6a8885a308d3ULL;
  for (const std::uint64_t t : tags) {
    h ^= t + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= h >> 31;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 29;
  }
  return h;
}

}  // namespace cptrd
