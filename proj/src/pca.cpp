#include "dsmd/pca.hpp"

#include <algorithm>
#include <cmath>

#include "dsmd/kernels.hpp"
#include "dsmd/rng.hpp"

namespace dsmd {

namespace {

constexpr std::size_t kMaxIterations = 200000;
constexpr double kStepTolerance = 1e-14;
// Relative to total variance; below this a direction carries no variance.
constexpr double kRankTolerance = 1e-12;

std::vector<double> mat_vec(const EmbeddingMatrix& a, const std::vector<double>& v) {
  std::vector<double> out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.dim(); ++j) s += a(i, j) * v[j];
    out[i] = s;
  }
  return out;
}

double vec_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void orthogonalize(std::vector<double>& v, const EmbeddingMatrix& basis, std::size_t count) {
  for (std::size_t c = 0; c < count; ++c) {
    auto b = basis.row(c);
    double proj = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) proj += v[i] * b[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * b[i];
  }
}

bool normalize(std::vector<double>& v) {
  const double n = std::sqrt(vec_dot(v, v));
  if (!(n > 0.0)) return false;
  for (double& x : v) x /= n;
  return true;
}

}  // namespace

PcaResult pca_project(const EmbeddingMatrix& emb, std::size_t k, std::uint64_t seed) {
  if (emb.rows() == 0 || emb.dim() == 0) throw ShapeError("pca_project: empty input");
  if (k == 0) throw ConfigError("pca_project: k must be >= 1");
  emb.require_finite("pca input");
  const std::size_t n = emb.rows(), d = emb.dim();

  EmbeddingMatrix centered = emb;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += emb(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered(i, j) -= mean;
  }
  EmbeddingMatrix cov = kernels::matmul_tn(centered, centered);
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (double& c : cov.values()) c /= denom;
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) total += cov(j, j);

  PcaResult res;
  res.components = EmbeddingMatrix(k, d);
  res.variances.assign(k, 0.0);
  res.explained_fraction.assign(k, 0.0);
  SeededRng rng(seed);
  EmbeddingMatrix deflated = cov;

  for (std::size_t c = 0; c < k; ++c) {
    if (c >= d) {
      res.rank_deficient = true;
      continue;
    }
    std::vector<double> v(d);
    do {
      for (double& x : v) x = rng.gaussian();
      orthogonalize(v, res.components, c);
    } while (!normalize(v));

    double variance = 0.0;
    for (std::size_t it = 0; it < kMaxIterations; ++it) {
      std::vector<double> w = mat_vec(deflated, v);
      orthogonalize(w, res.components, c);
      if (std::sqrt(vec_dot(w, w)) <= kRankTolerance * total) {
        // Null direction: v stays an arbitrary unit vector orthogonal to the rest.
        break;
      }
      normalize(w);
      double step = 0.0;
      for (std::size_t i = 0; i < d; ++i) step = std::max(step, std::abs(w[i] - v[i]));
      v = std::move(w);
      if (step < kStepTolerance) break;
    }
    variance = vec_dot(v, mat_vec(cov, v));
    if (variance <= kRankTolerance * total) {
      res.rank_deficient = true;
      variance = std::max(variance, 0.0);
    }

    for (double x : v) {
      if (std::abs(x) > 1e-12) {
        if (x < 0.0) {
          for (double& y : v) y = -y;
        }
        break;
      }
    }
    std::copy(v.begin(), v.end(), res.components.row(c).begin());
    res.variances[c] = variance;
    res.explained_fraction[c] = total > 0.0 ? variance / total : 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) deflated(i, j) -= variance * v[i] * v[j];
  }

  res.coords = kernels::matmul_nt(centered, res.components);
  return res;
}

}  // namespace dsmd
