#pragma once

#include <span>
#include <vector>

#include "dsmd/matrix.hpp"

namespace dsmd {

/// Rows with Euclidean norm below this are treated as degenerate.
inline constexpr double kZeroNormThreshold = 1e-30;

/// Scales every row to unit Euclidean norm. Throws ZeroVectorError naming the
/// first row whose norm is below kZeroNormThreshold.
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);

/// rows_a x rows_b matrix of cosine similarities.
EmbeddingMatrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

/// softmax(v / temperature) with max subtraction. Throws ConfigError for
/// temperature <= 0 and ShapeError for empty input.
std::vector<double> stable_softmax(std::span<const double> v, double temperature);

/// log(sum_i exp(v_i)), computed without overflow.
double log_sum_exp(std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

}  // namespace dsmd
