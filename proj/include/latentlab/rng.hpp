#pragma once

#include "latentlab/core.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace latentlab {

/// xoshiro256** generator seeded through splitmix64, with Box-Muller normals.
///
/// The stream is fully specified by the seed: the four state words are the
/// first four splitmix64 outputs of `seed`, uniforms use the top 53 bits, and
/// normals come in Box-Muller pairs (the cosine branch first, the sine branch
/// cached for the next call). Satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
    has_spare_ = false;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1].
  double uniform_open_zero() { return static_cast<double>(((*this)() >> 11) + 1) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform_open_zero()));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// rows x cols standard-normal matrix, filled in row-major order.
  template <typename Scalar = double>
  Matrix<Scalar> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix<Scalar> out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = static_cast<Scalar>(normal());
    return out;
  }

  template <typename Scalar = double>
  Vector<Scalar> normal_vector(Eigen::Index size) {
    Vector<Scalar> out(size);
    for (Eigen::Index i = 0; i < size; ++i) out(i) = static_cast<Scalar>(normal());
    return out;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace latentlab
