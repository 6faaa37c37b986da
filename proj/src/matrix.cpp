#include "musrec/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "musrec/error.hpp"

namespace musrec {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data size " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::row(std::initializer_list<double> values) {
  return Matrix(1, values.size(), std::vector<double>(values));
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "matrix +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "matrix -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

void axpy(Matrix& a, double s, const Matrix& b) {
  require_same_shape(a, b, "axpy");
  double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += s * pb[i];
}

double squared_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return s;
}

double l2_norm(const Matrix& m) { return std::sqrt(squared_norm(m)); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace musrec
