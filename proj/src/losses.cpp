#include "dsmd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dsmd/embedding.hpp"
#include "dsmd/kernels.hpp"

namespace dsmd {

// ---------------------------------------------------------------------------
// FeatureQueue

FeatureQueue::FeatureQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), image_(capacity, dim), text_(capacity, dim) {
  if (capacity == 0) throw ConfigError("queue capacity must be >= 1");
}

void FeatureQueue::push(const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t) {
  if (t_v.dim() != dim_ || t_t.dim() != dim_) throw ShapeError("queue_push: dim mismatch");
  if (t_v.rows() != t_t.rows()) throw ShapeError("queue_push: modality batch sizes differ");
  for (const EmbeddingMatrix* m : {&t_v, &t_t}) {
    const auto norms = kernels::row_norms(*m);
    for (std::size_t r = 0; r < norms.size(); ++r) {
      if (!(std::abs(norms[r] - 1.0) <= 1e-6)) {
        throw ShapeError("queue_push: row " + std::to_string(r) + " is not unit-norm");
      }
    }
  }
  for (std::size_t r = 0; r < t_v.rows(); ++r) {
    std::copy(t_v.row(r).begin(), t_v.row(r).end(), image_.row(head_).begin());
    std::copy(t_t.row(r).begin(), t_t.row(r).end(), text_.row(head_).begin());
    head_ = (head_ + 1) % capacity_;
    fill_ = std::min(fill_ + 1, capacity_);
  }
}

EmbeddingMatrix FeatureQueue::snapshot(const EmbeddingMatrix& ring) const {
  EmbeddingMatrix out(fill_, dim_);
  const std::size_t oldest = (head_ + capacity_ - fill_) % capacity_;
  for (std::size_t i = 0; i < fill_; ++i) {
    auto src = ring.row((oldest + i) % capacity_);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

void require_batch(const EmbeddingMatrix& s, const EmbeddingMatrix& t, const char* what) {
  require_same_shape(s, t, what);
  if (s.rows() == 0) throw ShapeError(std::string(what) + ": empty batch");
}

double cosine(std::span<const double> a, std::span<const double> b, double na, double nb) {
  return dot(a, b) / (na * nb);
}

// out += scale * d cos(a, c) / d a
void add_cosine_grad(std::span<const double> a, std::span<const double> c, double na, double nc,
                     double scale, std::span<double> out) {
  const double cs = cosine(a, c, na, nc);
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] += scale * (c[i] / (na * nc) - cs * a[i] / (na * na));
  }
}

double sum_in_order(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Contrastive

ModalityLoss contrastive_loss(const EmbeddingMatrix& s, const EmbeddingMatrix& t_pos,
                              const EmbeddingMatrix& queue_rows, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be > 0");
  require_batch(s, t_pos, "contrastive_loss");
  if (queue_rows.rows() > 0 && queue_rows.dim() != s.dim()) {
    throw ShapeError("contrastive_loss: queue dim mismatch");
  }
  const std::size_t batch = s.rows();
  const std::size_t nq = queue_rows.rows();
  const EmbeddingMatrix neg = nq > 0 ? kernels::matmul_nt(s, queue_rows) : EmbeddingMatrix(batch, 0);

  ModalityLoss out{0.0, EmbeddingMatrix(batch, s.dim())};
  std::vector<double> per_anchor(batch);
  const double inv_b = 1.0 / static_cast<double>(batch);
  std::vector<double> logits(nq + 1);
  for (std::size_t k = 0; k < batch; ++k) {
    logits[0] = dot(s.row(k), t_pos.row(k)) / tau;
    for (std::size_t i = 0; i < nq; ++i) logits[i + 1] = neg(k, i) / tau;

    const double top = *std::max_element(logits.begin(), logits.end());
    if (top == logits[0]) {
      // log1p keeps precision when the positive dominates.
      double rest = 0.0;
      for (std::size_t i = 1; i <= nq; ++i) rest += std::exp(logits[i] - logits[0]);
      per_anchor[k] = std::log1p(rest);
    } else {
      per_anchor[k] = log_sum_exp(logits) - logits[0];
    }

    const auto p = stable_softmax(logits, 1.0);
    auto g = out.grad.row(k);
    const double scale = inv_b / tau;
    auto pos = t_pos.row(k);
    for (std::size_t d = 0; d < g.size(); ++d) g[d] = scale * (p[0] - 1.0) * pos[d];
    for (std::size_t i = 0; i < nq; ++i) {
      auto q = queue_rows.row(i);
      const double w = scale * p[i + 1];
      for (std::size_t d = 0; d < g.size(); ++d) g[d] += w * q[d];
    }
  }
  out.value = sum_in_order(per_anchor) * inv_b;
  return out;
}

LossTerm contrastive_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                  const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t,
                                  const FeatureQueue& queue, double tau) {
  if (s_v.rows() != s_t.rows()) throw ShapeError("contrastive_distillation: batch sizes differ");
  auto img = contrastive_loss(s_v, t_v, queue.image_rows(), tau);
  auto txt = contrastive_loss(s_t, t_t, queue.text_rows(), tau);
  return LossTerm{Task::CD, img.value + txt.value, std::move(img.grad), std::move(txt.grad)};
}

// ---------------------------------------------------------------------------
// Feature (L1)

LossTerm feature_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& t_v,
                              const EmbeddingMatrix& s_t, const EmbeddingMatrix& t_t) {
  require_batch(s_v, t_v, "feature_distillation (image)");
  require_batch(s_t, t_t, "feature_distillation (text)");
  auto one = [](const EmbeddingMatrix& s, const EmbeddingMatrix& t, EmbeddingMatrix& grad) {
    const double inv_b = 1.0 / static_cast<double>(s.rows());
    grad = EmbeddingMatrix(s.rows(), s.dim());
    std::vector<double> per_row(s.rows());
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t d = 0; d < s.dim(); ++d) {
        const double diff = s(r, d) - t(r, d);
        acc += std::abs(diff);
        grad(r, d) = diff > 0.0 ? inv_b : (diff < 0.0 ? -inv_b : 0.0);
      }
      per_row[r] = acc;
    }
    return sum_in_order(per_row) * inv_b;
  };
  LossTerm out{Task::FD, 0.0, {}, {}};
  out.value = one(s_v, t_v, out.grad_s_v);
  out.value += one(s_t, t_t, out.grad_s_t);
  return out;
}

// ---------------------------------------------------------------------------
// Similarity (cosine)

LossTerm similarity_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& t_v,
                                 const EmbeddingMatrix& s_t, const EmbeddingMatrix& t_t) {
  require_batch(s_v, t_v, "similarity_distillation (image)");
  require_batch(s_t, t_t, "similarity_distillation (text)");
  auto one = [](const EmbeddingMatrix& s, const EmbeddingMatrix& t, EmbeddingMatrix& grad) {
    const double inv_b = 1.0 / static_cast<double>(s.rows());
    const auto ns = kernels::row_norms(s);
    const auto nt = kernels::row_norms(t);
    grad = EmbeddingMatrix(s.rows(), s.dim());
    std::vector<double> per_row(s.rows());
    for (std::size_t r = 0; r < s.rows(); ++r) {
      per_row[r] = 1.0 - cosine(s.row(r), t.row(r), ns[r], nt[r]);
      add_cosine_grad(s.row(r), t.row(r), ns[r], nt[r], -inv_b, grad.row(r));
    }
    return sum_in_order(per_row) * inv_b;
  };
  LossTerm out{Task::SD, 0.0, {}, {}};
  out.value = one(s_v, t_v, out.grad_s_v);
  out.value += one(s_t, t_t, out.grad_s_t);
  return out;
}

// ---------------------------------------------------------------------------
// Hard negatives

namespace {

struct DirectionSpec {
  const EmbeddingMatrix* anchor;
  const EmbeddingMatrix* candidates;
  bool anchor_is_image;
};

std::array<DirectionSpec, 4> directions(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                        const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t) {
  return {DirectionSpec{&s_v, &t_v, true}, DirectionSpec{&s_t, &t_t, false},
          DirectionSpec{&s_v, &t_t, true}, DirectionSpec{&s_t, &t_v, false}};
}

void require_hnd_shapes(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                        const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t) {
  require_same_shape(s_v, t_v, "hard_negative_distillation (image)");
  require_same_shape(s_t, t_t, "hard_negative_distillation (text)");
  require_same_shape(s_v, s_t, "hard_negative_distillation (modalities)");
  if (s_v.rows() < 2) throw ShapeError("hard_negative_distillation: batch < 2 has no negatives");
}

std::vector<std::size_t> argmax_off_diagonal(const EmbeddingMatrix& sim) {
  std::vector<std::size_t> out(sim.rows());
  for (std::size_t k = 0; k < sim.rows(); ++k) {
    std::size_t best = k == 0 ? 1 : 0;
    for (std::size_t j = best + 1; j < sim.dim(); ++j) {
      if (j != k && sim(k, j) > sim(k, best)) best = j;
    }
    out[k] = best;
  }
  return out;
}

}  // namespace

std::array<std::vector<std::size_t>, 4> mine_hard_negatives(const EmbeddingMatrix& s_v,
                                                            const EmbeddingMatrix& s_t,
                                                            const EmbeddingMatrix& t_v,
                                                            const EmbeddingMatrix& t_t) {
  require_hnd_shapes(s_v, s_t, t_v, t_t);
  std::array<std::vector<std::size_t>, 4> out;
  const auto dirs = directions(s_v, s_t, t_v, t_t);
  for (std::size_t d = 0; d < 4; ++d) {
    out[d] = argmax_off_diagonal(kernels::cosine_matrix(*dirs[d].anchor, *dirs[d].candidates));
  }
  return out;
}

LossTerm hard_negative_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                    const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t,
                                    double alpha) {
  require_hnd_shapes(s_v, s_t, t_v, t_t);
  if (!(alpha >= 0.0)) throw ConfigError("margin alpha must be >= 0");
  const std::size_t batch = s_v.rows();
  const double inv_b = 1.0 / static_cast<double>(batch);

  LossTerm out{Task::HND, 0.0, EmbeddingMatrix(batch, s_v.dim()), EmbeddingMatrix(batch, s_t.dim())};
  std::vector<double> per_anchor(batch, 0.0);
  const auto dirs = directions(s_v, s_t, t_v, t_t);
  for (const DirectionSpec& dir : dirs) {
    const EmbeddingMatrix sim = kernels::cosine_matrix(*dir.anchor, *dir.candidates);
    const auto hard = argmax_off_diagonal(sim);
    const auto na = kernels::row_norms(*dir.anchor);
    const auto nc = kernels::row_norms(*dir.candidates);
    EmbeddingMatrix& grad = dir.anchor_is_image ? out.grad_s_v : out.grad_s_t;
    for (std::size_t k = 0; k < batch; ++k) {
      const std::size_t h = hard[k];
      const double term = alpha - sim(k, k) + sim(k, h);
      if (term <= 0.0) continue;
      per_anchor[k] += term;
      const auto a = dir.anchor->row(k);
      add_cosine_grad(a, dir.candidates->row(k), na[k], nc[k], -inv_b, grad.row(k));
      add_cosine_grad(a, dir.candidates->row(h), na[k], nc[h], inv_b, grad.row(k));
    }
  }
  out.value = sum_in_order(per_anchor) * inv_b;
  return out;
}

std::array<LossTerm, kTaskCount> compute_all(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                             const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t,
                                             const FeatureQueue& queue, double tau, double alpha) {
  return {contrastive_distillation(s_v, s_t, t_v, t_t, queue, tau),
          feature_distillation(s_v, t_v, s_t, t_t), similarity_distillation(s_v, t_v, s_t, t_t),
          hard_negative_distillation(s_v, s_t, t_v, t_t, alpha)};
}

}  // namespace dsmd
