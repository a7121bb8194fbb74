#pragma once

#include <cstdint>
#include <vector>

#include "dsmd/matrix.hpp"

namespace dsmd {

struct PcaResult {
  EmbeddingMatrix coords;      // N x k projections of the centered data
  EmbeddingMatrix components;  // k x D, orthonormal rows
  std::vector<double> variances;           // eigenvalues of the sample covariance (N - 1)
  std::vector<double> explained_fraction;  // variances / total variance
  bool rank_deficient = false;             // fewer than k components carry variance
};

/// Top-k principal components by power iteration with deflation. Components
/// are ordered by variance; each one's first non-negligible loading is
/// positive.
PcaResult pca_project(const EmbeddingMatrix& emb, std::size_t k = 3, std::uint64_t seed = 0);

}  // namespace dsmd
