#pragma once

#include <array>
#include <cstddef>
#include <string_view>
#include <vector>

#include "dsmd/matrix.hpp"

namespace dsmd {

enum class Task : std::size_t { CD = 0, FD = 1, SD = 2, HND = 3 };
inline constexpr std::size_t kTaskCount = 4;
inline constexpr std::array<std::string_view, kTaskCount> kTaskNames{"CD", "FD", "SD", "HND"};

/// Fixed-capacity FIFO of past teacher rows, one ring buffer per modality.
class FeatureQueue {
 public:
  FeatureQueue(std::size_t capacity, std::size_t dim);

  /// Appends both batches (unit-norm rows, |x| within 1e-6), evicting the
  /// oldest rows beyond capacity. Throws ShapeError on dim or norm violations.
  void push(const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t fill() const { return fill_; }
  std::size_t head() const { return head_; }

  /// Stored rows oldest-first.
  EmbeddingMatrix image_rows() const { return snapshot(image_); }
  EmbeddingMatrix text_rows() const { return snapshot(text_); }

 private:
  EmbeddingMatrix snapshot(const EmbeddingMatrix& ring) const;

  std::size_t capacity_;
  std::size_t dim_;
  std::size_t fill_ = 0;
  std::size_t head_ = 0;  // next slot to write
  EmbeddingMatrix image_;
  EmbeddingMatrix text_;
};

/// Value plus gradients w.r.t. the student batch embeddings.
struct LossTerm {
  Task task = Task::CD;
  double value = 0.0;
  EmbeddingMatrix grad_s_v;
  EmbeddingMatrix grad_s_t;
};

struct ModalityLoss {
  double value = 0.0;
  EmbeddingMatrix grad;
};

/// InfoNCE against the positive plus every queue row:
///   mean_k -log( exp(s_k.t_k/tau) / (exp(s_k.t_k/tau) + sum_i exp(s_k.q_i/tau)) )
ModalityLoss contrastive_loss(const EmbeddingMatrix& s, const EmbeddingMatrix& t_pos,
                              const EmbeddingMatrix& queue_rows, double tau);

/// Image plus text contrastive terms. Reads the queue, never mutates it.
LossTerm contrastive_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                  const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t,
                                  const FeatureQueue& queue, double tau);

/// Batch-mean L1 distance per modality, summed. Subgradient sign(s - t)/B, sign(0) = 0.
LossTerm feature_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& t_v,
                              const EmbeddingMatrix& s_t, const EmbeddingMatrix& t_t);

/// Batch-mean (1 - cos) per modality, summed.
LossTerm similarity_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& t_v,
                                 const EmbeddingMatrix& s_t, const EmbeddingMatrix& t_t);

enum class Direction : std::size_t { image = 0, text = 1, image_to_text = 2, text_to_image = 3 };

/// Hardest in-batch negative index per anchor, per direction (indexed by Direction).
/// Candidates come from the teacher matrix of the direction's positive:
/// image: s_v vs t_v, text: s_t vs t_t, image_to_text: s_v vs t_t,
/// text_to_image: s_t vs t_v. Ties resolve to the lowest index.
std::array<std::vector<std::size_t>, 4> mine_hard_negatives(const EmbeddingMatrix& s_v,
                                                            const EmbeddingMatrix& s_t,
                                                            const EmbeddingMatrix& t_v,
                                                            const EmbeddingMatrix& t_t);

/// Batch mean of the four hinge terms max(alpha - cos(a, pos) + cos(a, hard), 0).
/// Hard-negative choice is held fixed for the gradient.
LossTerm hard_negative_distillation(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                    const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t,
                                    double alpha);

/// [CD, FD, SD, HND].
std::array<LossTerm, kTaskCount> compute_all(const EmbeddingMatrix& s_v, const EmbeddingMatrix& s_t,
                                             const EmbeddingMatrix& t_v, const EmbeddingMatrix& t_t,
                                             const FeatureQueue& queue, double tau, double alpha);

}  // namespace dsmd
