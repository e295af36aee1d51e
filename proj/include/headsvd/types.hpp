#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace headsvd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input files, shape or count mismatches, invariant violations.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Numerical failures: SVD non-convergence, degenerate vectors, solver limits.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Remote judge transport or parse failures.
class JudgeError : public Error {
 public:
  using Error::Error;
};

enum class Side { left, right };

inline const char* to_string(Side side) { return side == Side::left ? "left" : "right"; }

Side side_from_string(const std::string& s);

/// Identifies one singular vector of one attention head.
struct TargetId {
  int layer = 0;
  int head = 0;
  Side side = Side::right;
  int index = 0;

  friend bool operator==(const TargetId&, const TargetId&) = default;
};

}  // namespace headsvd
