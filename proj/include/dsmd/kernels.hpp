#pragma once

#include <cstddef>
#include <vector>

#include "dsmd/matrix.hpp"

// Dense kernels behind the model, losses and evaluator.
//
// dsmd::kernels::*          OpenMP-parallel over output rows.
// dsmd::kernels::serial::*  plain loop reference, kept for tests and benches.
//
// Every output element is accumulated by one thread in ascending inner index
// order, so the two variants agree bitwise for any thread count.

namespace dsmd::kernels {

/// C = A * B^T, A is n x k, B is m x k.
EmbeddingMatrix matmul_nt(const EmbeddingMatrix& a, const EmbeddingMatrix& b);
/// C = A * B, A is n x k, B is k x m.
EmbeddingMatrix matmul_nn(const EmbeddingMatrix& a, const EmbeddingMatrix& b);
/// C = A^T * B, A is n x k, B is n x m.
EmbeddingMatrix matmul_tn(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

std::vector<double> row_norms(const EmbeddingMatrix& m);
/// Entry (i, j) = <a_i, b_j> / (|a_i| |b_j|). Norms must be nonzero.
EmbeddingMatrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

/// For each query row q of `sim`, the smallest rank over its ground-truth
/// columns gt[q]. Rank = number of columns strictly ahead, where a column is
/// ahead if its score is higher, or equal with a lower index.
std::vector<std::size_t> best_gt_rank(const EmbeddingMatrix& sim,
                                      const std::vector<std::vector<std::size_t>>& gt);

namespace serial {
EmbeddingMatrix matmul_nt(const EmbeddingMatrix& a, const EmbeddingMatrix& b);
EmbeddingMatrix matmul_nn(const EmbeddingMatrix& a, const EmbeddingMatrix& b);
EmbeddingMatrix matmul_tn(const EmbeddingMatrix& a, const EmbeddingMatrix& b);
std::vector<double> row_norms(const EmbeddingMatrix& m);
EmbeddingMatrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b);
std::vector<std::size_t> best_gt_rank(const EmbeddingMatrix& sim,
                                      const std::vector<std::vector<std::size_t>>& gt);
}  // namespace serial

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int thread_count();

}  // namespace dsmd::kernels
