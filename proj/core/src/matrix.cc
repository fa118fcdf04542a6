#include "ranktuner/matrix.h"

#include <algorithm>
#include <cmath>

#include "ranktuner/error.h"

namespace ranktuner {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw InputError("matrix data length " + std::to_string(data_.size()) +
                     " does not match shape " + std::to_string(rows_) + "x" +
                     std::to_string(cols_));
  }
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

double Matrix::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

Matrix Matrix::select_cols(std::span<const std::size_t> keep) const {
  Matrix out(rows_, keep.size());
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t j = 0; j < keep.size(); ++j) {
      out(r, j) = (*this)(r, keep[j]);
    }
  }
  return out;
}

Matrix Matrix::select_rows(std::span<const std::size_t> keep) const {
  Matrix out(keep.size(), cols_);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy_n(data_.begin() + keep[i] * cols_, cols_,
                out.data_.begin() + i * cols_);
  }
  return out;
}

Matrix from_eigen(const EigenRowMajor& m) {
  Matrix out(m.rows(), m.cols());
  out.map() = m;
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError("max_abs_diff: shape mismatch");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

void to_json(nlohmann::json& j, const Matrix& m) {
  j = nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

void from_json(const nlohmann::json& j, Matrix& m) {
  m = Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
             j.at("data").get<std::vector<double>>());
}

}  // namespace ranktuner
