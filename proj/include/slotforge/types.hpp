#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace slotforge {

// All slot arithmetic is double precision; Eigen is the only math dependency.
using Scalar = double;
using SlotVector = Eigen::ArrayXd;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LevelUnderflow : Error {
  using Error::Error;
};
struct InvalidTarget : Error {
  using Error::Error;
};
struct ShapeMismatch : Error {
  using Error::Error;
};
struct LayoutMismatch : Error {
  using Error::Error;
};
struct CacheFull : Error {
  using Error::Error;
};
struct CacheEmpty : Error {
  using Error::Error;
};
struct DomainViolation : Error {
  using Error::Error;
};
struct NoFeasiblePath : Error {
  using Error::Error;
};
struct InfeasibleLayer : Error {
  using Error::Error;
};

constexpr bool is_pow2(long long v) { return v > 0 && (v & (v - 1)) == 0; }

inline int log2_exact(long long v) {
  if (!is_pow2(v)) throw ShapeMismatch("log2_exact: " + std::to_string(v) + " is not a power of two");
  int k = 0;
  while (v > 1) {
    v >>= 1;
    ++k;
  }
  return k;
}

inline long long next_pow2(long long v) {
  long long p = 1;
  while (p < v) p <<= 1;
  return p;
}

// Mathematical (always non-negative) remainder.
constexpr long long pos_mod(long long a, long long m) { return ((a % m) + m) % m; }

}  // namespace slotforge
