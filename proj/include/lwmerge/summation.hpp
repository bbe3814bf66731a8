#pragma once

#include <cmath>

namespace lwmerge {

/// Compensated (Kahan-Babuska-Neumaier) running sum. The result depends only
/// on the order of add() calls, so a fixed visiting order gives bit-identical
/// totals.
class CompensatedSum {
 public:
  void add(double value) {
    const double t = sum_ + value;
    if (std::fabs(sum_) >= std::fabs(value)) {
      compensation_ += (sum_ - t) + value;
    } else {
      compensation_ += (value - t) + sum_;
    }
    sum_ = t;
  }

  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

}  // namespace lwmerge
