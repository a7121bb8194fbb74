#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dsmd/errors.hpp"

namespace dsmd {

/// Dense row-major matrix of doubles. Used for feature batches (one row per
/// sample) as well as layer weights (out x in).
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t dim, double fill = 0.0)
      : rows_(rows), dim_(dim), data_(rows * dim, fill) {}
  EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<double> data)
      : rows_(rows), dim_(dim), data_(std::move(data)) {
    if (data_.size() != rows_ * dim_) {
      throw ShapeError("matrix data length does not equal rows*dim");
    }
  }
  static EmbeddingMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * dim_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * dim_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * dim_, dim_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * dim_, dim_}; }

  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  /// Copies the listed rows, in order, into a new matrix.
  EmbeddingMatrix gather(std::span<const std::size_t> indices) const;

  bool all_finite() const;
  /// Throws NumericsError naming `what` if any entry is NaN/Inf.
  void require_finite(const char* what) const;

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                               const char* what) {
  if (a.rows() != b.rows() || a.dim() != b.dim()) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.dim()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.dim()) + ")");
  }
}

}  // namespace dsmd
