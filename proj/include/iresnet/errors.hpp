#pragma once

#include <stdexcept>
#include <string>

namespace iresnet {

/// An iterative solver hit its iteration cap.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double last_increment, int iterations)
      : std::runtime_error(what + " (last increment " + std::to_string(last_increment) +
                           " after " + std::to_string(iterations) + " iterations)"),
        last_increment_(last_increment),
        iterations_(iterations) {}

  double last_increment() const noexcept { return last_increment_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double last_increment_;
  int iterations_;
};

/// Non-finite values appeared during an evaluation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent files (datasets, checkpoints, images).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace iresnet
