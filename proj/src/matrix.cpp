#include "dsmd/matrix.hpp"

#include <algorithm>
#include <cmath>

namespace dsmd {

EmbeddingMatrix EmbeddingMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  const std::size_t d = rows.front().size();
  EmbeddingMatrix m(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != d) throw ShapeError("from_rows: ragged input");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

EmbeddingMatrix EmbeddingMatrix::gather(std::span<const std::size_t> indices) const {
  EmbeddingMatrix out(indices.size(), dim_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw ShapeError("gather: row index out of range");
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

bool EmbeddingMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void EmbeddingMatrix::require_finite(const char* what) const {
  if (!all_finite()) throw NumericsError(std::string("non-finite value in ") + what);
}

}  // namespace dsmd
