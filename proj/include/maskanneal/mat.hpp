#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskanneal {

/// Dense row-major matrix of doubles with value semantics. Scalars are 1x1,
/// row vectors 1xC, column vectors Rx1.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

  static Mat scalar(double x) {
    Mat m(1, 1);
    m.v_[0] = x;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return v_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double min() const {
    double m = v_.empty() ? 0.0 : v_[0];
    for (double x : v_) m = x < m ? x : m;
    return m;
  }
  double max() const {
    double m = v_.empty() ? 0.0 : v_[0];
    for (double x : v_) m = x > m ? x : m;
    return m;
  }
  double max_abs() const {
    double m = 0.0;
    for (double x : v_) m = std::abs(x) > m ? std::abs(x) : m;
    return m;
  }
  double sum() const {
    double s = 0.0;
    for (double x : v_) s += x;
    return s;
  }
  double mean() const { return v_.empty() ? 0.0 : sum() / double(v_.size()); }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> v_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace maskanneal
