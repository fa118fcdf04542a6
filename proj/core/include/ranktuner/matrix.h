#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace ranktuner {

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major matrix of doubles. Storage is owned; arithmetic goes
// through Eigen maps.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Eigen::Map<EigenRowMajor> map() {
    return {data_.data(), static_cast<Eigen::Index>(rows_),
            static_cast<Eigen::Index>(cols_)};
  }
  Eigen::Map<const EigenRowMajor> map() const {
    return {data_.data(), static_cast<Eigen::Index>(rows_),
            static_cast<Eigen::Index>(cols_)};
  }

  void fill(double v);
  bool all_finite() const;
  double squared_norm() const;

  // Column subset [keep] in the given order.
  Matrix select_cols(std::span<const std::size_t> keep) const;
  Matrix select_rows(std::span<const std::size_t> keep) const;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix from_eigen(const EigenRowMajor& m);

// Max absolute elementwise difference; shapes must agree.
double max_abs_diff(const Matrix& a, const Matrix& b);

void to_json(nlohmann::json& j, const Matrix& m);
void from_json(const nlohmann::json& j, Matrix& m);

}  // namespace ranktuner
