#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ermc/error.hpp"

namespace ermc {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::dimension, "matrix storage does not match shape");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::dimension, "matrix shapes differ");
  }
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
  return out;
}

// Rows [first, first + count).
inline Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count) {
  Matrix out(count, m.cols());
  std::copy_n(m.values().begin() + static_cast<std::ptrdiff_t>(first * m.cols()),
              count * m.cols(), out.values().begin());
  return out;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ranges::copy(m.row(rows[i]), out.row(i).begin());
  }
  return out;
}

inline bool all_finite(std::span<const double> v) {
  return std::ranges::all_of(v, [](double x) { return std::isfinite(x); });
}

// A flattened point in weight space.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  std::size_t size() const noexcept { return values_.size(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& storage() const noexcept { return values_; }

  bool is_finite() const { return all_finite(values_); }

  bool operator==(const ParamVector&) const = default;

 private:
  std::vector<double> values_;
};

// Classification data: one row per sample.
struct LabeledBatch {
  Matrix inputs;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return inputs.cols(); }
};

inline void validate_batch(const LabeledBatch& batch, std::size_t input_dim,
                           std::size_t num_classes) {
  if (batch.labels.empty()) throw Error(ErrorCode::domain, "batch is empty");
  if (batch.inputs.rows() != batch.labels.size()) {
    throw Error(ErrorCode::dimension, "inputs and labels disagree on batch size");
  }
  if (batch.inputs.cols() != input_dim) {
    throw Error(ErrorCode::dimension, "input width " + std::to_string(batch.inputs.cols()) +
                                          " does not match model input " +
                                          std::to_string(input_dim));
  }
  for (int y : batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw Error(ErrorCode::domain, "label " + std::to_string(y) + " out of range");
    }
  }
}

inline LabeledBatch gather(const LabeledBatch& batch, std::span<const std::size_t> rows) {
  LabeledBatch out{gather_rows(batch.inputs, rows), {}};
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(batch.labels[r]);
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace ermc
