#include "dsmd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dsmd::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 14;

void check_inner(std::size_t lhs, std::size_t rhs, const char* what) {
  if (lhs != rhs) {
    throw ShapeError(std::string(what) + ": inner dimensions differ (" + std::to_string(lhs) +
                     " vs " + std::to_string(rhs) + ")");
  }
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

inline std::size_t rank_of(const double* row, std::size_t cols, std::size_t target) {
  const double score = row[target];
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    if (row[j] > score || (row[j] == score && j < target)) ++ahead;
  }
  return ahead;
}

}  // namespace

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

EmbeddingMatrix matmul_nt(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.dim(), b.dim(), "matmul_nt");
  const std::size_t n = a.rows(), m = b.rows(), k = a.dim();
  EmbeddingMatrix c(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * m * k > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) pc[i * m + j] = dot(pa + i * k, pb + j * k, k);
  }
  return c;
}

EmbeddingMatrix matmul_nn(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.dim(), b.rows(), "matmul_nn");
  const std::size_t n = a.rows(), k = a.dim(), m = b.dim();
  EmbeddingMatrix c(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * m * k > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    double* ci = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* bp = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

EmbeddingMatrix matmul_tn(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  const std::size_t n = a.rows(), k = a.dim(), m = b.dim();
  EmbeddingMatrix c(k, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  const auto out_rows = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(static) if (n * m * k > kParallelWork)
  for (std::int64_t p = 0; p < out_rows; ++p) {
    double* cp = pc + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double aip = pa[i * k + p];
      const double* bi = pb + i * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * bi[j];
    }
  }
  return c;
}

std::vector<double> row_norms(const EmbeddingMatrix& m) {
  std::vector<double> out(m.rows());
  const auto rows = static_cast<std::int64_t>(m.rows());
  const std::size_t d = m.dim();
  const double* p = m.values().data();
#pragma omp parallel for schedule(static) if (m.size() > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) out[i] = std::sqrt(dot(p + i * d, p + i * d, d));
  return out;
}

EmbeddingMatrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.dim(), b.dim(), "cosine_matrix");
  const auto na = row_norms(a);
  const auto nb = row_norms(b);
  const std::size_t n = a.rows(), m = b.rows(), k = a.dim();
  EmbeddingMatrix c(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * m * k > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      pc[i * m + j] = dot(pa + i * k, pb + j * k, k) / (na[i] * nb[j]);
    }
  }
  return c;
}

std::vector<std::size_t> best_gt_rank(const EmbeddingMatrix& sim,
                                      const std::vector<std::vector<std::size_t>>& gt) {
  if (gt.size() != sim.rows()) throw ShapeError("best_gt_rank: one gt list per query required");
  std::vector<std::size_t> out(sim.rows());
  const std::size_t cols = sim.dim();
  const auto rows = static_cast<std::int64_t>(sim.rows());
#pragma omp parallel for schedule(static) if (sim.size() > kParallelWork)
  for (std::int64_t q = 0; q < rows; ++q) {
    std::size_t best = cols;
    for (std::size_t target : gt[q]) {
      const std::size_t r = rank_of(sim.values().data() + q * cols, cols, target);
      if (r < best) best = r;
    }
    out[q] = best;
  }
  return out;
}

namespace serial {

EmbeddingMatrix matmul_nt(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.dim(), b.dim(), "matmul_nt");
  EmbeddingMatrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.dim(); ++p) s += a(i, p) * b(j, p);
      c(i, j) = s;
    }
  return c;
}

EmbeddingMatrix matmul_nn(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.dim(), b.rows(), "matmul_nn");
  EmbeddingMatrix c(a.rows(), b.dim());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.dim(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.dim(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

EmbeddingMatrix matmul_tn(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  EmbeddingMatrix c(a.dim(), b.dim());
  for (std::size_t p = 0; p < a.dim(); ++p)
    for (std::size_t j = 0; j < b.dim(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, p) * b(i, j);
      c(p, j) = s;
    }
  return c;
}

std::vector<double> row_norms(const EmbeddingMatrix& m) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double v : m.row(i)) s += v * v;
    out[i] = std::sqrt(s);
  }
  return out;
}

EmbeddingMatrix cosine_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  const auto na = row_norms(a);
  const auto nb = row_norms(b);
  EmbeddingMatrix c = matmul_nt(a, b);
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.dim(); ++j) c(i, j) /= na[i] * nb[j];
  return c;
}

std::vector<std::size_t> best_gt_rank(const EmbeddingMatrix& sim,
                                      const std::vector<std::vector<std::size_t>>& gt) {
  if (gt.size() != sim.rows()) throw ShapeError("best_gt_rank: one gt list per query required");
  std::vector<std::size_t> out(sim.rows());
  for (std::size_t q = 0; q < sim.rows(); ++q) {
    std::size_t best = sim.dim();
    for (std::size_t target : gt[q]) {
      best = std::min(best, rank_of(sim.values().data() + q * sim.dim(), sim.dim(), target));
    }
    out[q] = best;
  }
  return out;
}

}  // namespace serial

}  // namespace dsmd::kernels
