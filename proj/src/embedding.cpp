#include "dsmd/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "dsmd/kernels.hpp"

namespace dsmd {

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  const auto norms = kernels::row_norms(m);
  for (std::size_t r = 0; r < norms.size(); ++r) {
    if (!(norms[r] >= kZeroNormThreshold)) throw ZeroVectorError(r);
  }
  EmbeddingMatrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (double& v : out.row(r)) v /= norms[r];
  }
  return out;
}

EmbeddingMatrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.dim() != b.dim()) throw ShapeError("cosine_matrix: dimension mismatch");
  for (const auto* m : {&a, &b}) {
    const auto norms = kernels::row_norms(*m);
    for (std::size_t r = 0; r < norms.size(); ++r) {
      if (!(norms[r] >= kZeroNormThreshold)) throw ZeroVectorError(r);
    }
  }
  return kernels::cosine_matrix(a, b);
}

std::vector<double> stable_softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be > 0");
  if (v.empty()) throw ShapeError("softmax of empty vector");
  const double top = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - top) / temperature);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("log_sum_exp of empty vector");
  const double top = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - top);
  return top + std::log(total);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace dsmd
