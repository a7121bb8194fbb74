#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmd/matrix.hpp"
#include "dsmd/teacher_bank.hpp"

namespace dsmd {

/// Layer sizes of one tower: input -> hidden... -> head_hidden... -> teacher_dim.
/// Every layer but the last is followed by tanh.
struct TowerArch {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;       // encoder
  std::vector<std::size_t> head_hidden_dims;  // extra projection-head layers, usually empty

  friend bool operator==(const TowerArch&, const TowerArch&) = default;
};

struct Architecture {
  TowerArch image;
  TowerArch text;
  std::size_t teacher_dim = 0;
  bool normalize_output = true;

  /// Layer widths from input to output for one tower.
  std::vector<std::size_t> widths(const TowerArch& tower) const;
  void validate() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

void to_json(nlohmann::json& j, const TowerArch& t);
void to_json(nlohmann::json& j, const Architecture& a);
Architecture architecture_from_json(const nlohmann::json& j);

struct Layer {
  EmbeddingMatrix weight;  // out x in
  std::vector<double> bias;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct Tower {
  std::vector<Layer> layers;

  friend bool operator==(const Tower&, const Tower&) = default;
};

/// Parameters of both towers. Also used for gradients and Adam moments, which
/// mirror the parameter shapes exactly.
struct StudentParams {
  Architecture arch;
  Tower image;
  Tower text;

  /// Zero-filled tensors with the same shapes.
  StudentParams zeros_like() const;
  std::size_t parameter_count() const;

  /// Visits every tensor in declaration order: image layers then text layers,
  /// each layer's weight before its bias.
  void for_each_tensor(
      const std::function<void(std::string_view name, std::span<double> values, bool is_weight)>& fn);
  void for_each_tensor(
      const std::function<void(std::string_view name, std::span<const double> values, bool is_weight)>&
          fn) const;

  friend bool operator==(const StudentParams&, const StudentParams&) = default;
};

using ParamGrads = StudentParams;

/// Glorot-uniform weights, zero biases. Draw order: image tower layers then
/// text tower layers, each weight row-major.
StudentParams init_params(const Architecture& arch, std::uint64_t seed);

struct TowerCache {
  std::vector<EmbeddingMatrix> layer_inputs;  // input to each layer
  EmbeddingMatrix pre_norm;                   // last layer output
  std::vector<double> norms;                  // row norms of pre_norm
};

struct StudentBatchOutput {
  EmbeddingMatrix s_v;
  EmbeddingMatrix s_t;
  TowerCache image_cache;
  TowerCache text_cache;
};

StudentBatchOutput forward(const StudentParams& params, const EmbeddingMatrix& x_v,
                           const EmbeddingMatrix& x_t);

/// Single-tower forward, for evaluating one modality without the other.
EmbeddingMatrix encode(const StudentParams& params, Modality modality, const EmbeddingMatrix& x);

ParamGrads backward(const StudentParams& params, const StudentBatchOutput& out,
                    const EmbeddingMatrix& grad_s_v, const EmbeddingMatrix& grad_s_t);

/// Pulls a gradient w.r.t. a normalized row back through s = z/|z|:
/// (I - s s^T) g / |z|, row by row.
EmbeddingMatrix normalization_backward(const EmbeddingMatrix& s, std::span<const double> norms,
                                       const EmbeddingMatrix& grad_s);

// ---------------------------------------------------------------------------
// AdamW

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  StudentParams m;
  StudentParams v;
  std::uint64_t step = 0;

  static OptimizerState fresh(const StudentParams& params);
};

/// One AdamW update of a single tensor at (1-based) step `t`. Decay is
/// decoupled: theta -= lr * wd * theta, using theta before the Adam step.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t t, double lr, double weight_decay,
                  const AdamWHyper& hyper = {});

/// Updates every tensor; weight decay applies to weights only. Throws
/// NumericsError naming the tensor before touching anything if a gradient is
/// non-finite.
void adamw_step(StudentParams& params, const ParamGrads& grads, OptimizerState& state, double lr,
                double weight_decay, const AdamWHyper& hyper = {});

enum class ScheduleMode { step, linear };

/// step:   base_lr before decay_epoch, base_lr * decay_rate from then on.
/// linear: base_lr before decay_epoch, then linear from base_lr at decay_epoch
///         to base_lr * decay_rate at the final epoch (total_epochs - 1).
double lr_at(std::size_t epoch, double base_lr, std::size_t decay_epoch, double decay_rate,
             ScheduleMode mode = ScheduleMode::step, std::size_t total_epochs = 0);

// ---------------------------------------------------------------------------
// Student inputs

struct StudentInputs {
  EmbeddingMatrix image;
  EmbeddingMatrix text;
};

/// Synthetic raw inputs for the student: each teacher row plus Gaussian noise
/// (stddev `noise` per coordinate), mapped through a fixed random linear map
/// (entries N(0, 1/D_T)) into `input_dim`. Separate maps per modality. Draw
/// order: image map, text map, image noise, text noise.
StudentInputs make_student_inputs(const TeacherBank& bank, std::size_t input_dim, double noise,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// DSMC container: "DSMC", u8 version=1, u32 descriptor length, descriptor
// JSON (UTF-8), then f64 little-endian tensors in declaration order.

struct Container {
  nlohmann::json descriptor;
  std::vector<double> payload;
};

void write_container(const std::string& path, const nlohmann::json& descriptor,
                     std::span<const double> payload);
Container read_container(const std::string& path);

void append_params(const StudentParams& params, std::vector<double>& out);
/// Fills tensors of `params` from payload starting at `offset`; returns the new offset.
std::size_t take_params(StudentParams& params, std::span<const double> payload, std::size_t offset);

void save_params(const std::string& path, const StudentParams& params);
StudentParams load_params(const std::string& path);

}  // namespace dsmd
