#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmd/balancer.hpp"
#include "dsmd/losses.hpp"
#include "dsmd/rng.hpp"
#include "dsmd/student.hpp"
#include "dsmd/teacher_bank.hpp"

namespace dsmd {

enum class BalancerGranularity { step, epoch };

/// Training hyperparameters. JSON field names are the member names below.
struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  double tau = 0.05;
  std::size_t queue_size = 8192;
  double alpha = 0.0;
  double balancer_temperature = 1.0;
  double balancer_k = 4.0;
  std::size_t decay_epoch = 10;
  double decay_rate = 0.1;
  std::uint64_t seed = 0;
  ScalingMode scaling = ScalingMode::literal;
  bool balancer = true;
  bool l2_norm = true;
  std::string loss_mask = "1111";  // CD FD SD HND
  ScheduleMode schedule = ScheduleMode::step;
  BalancerGranularity balancer_granularity = BalancerGranularity::step;

  // student side
  std::size_t input_dim = 48;
  std::vector<std::size_t> hidden_dims{32};
  std::vector<std::size_t> head_hidden_dims;
  double input_noise = 0.3;
  std::uint64_t input_seed = 1;

  void validate() const;
  bool task_enabled(Task t) const { return loss_mask[static_cast<std::size_t>(t)] == '1'; }
  Architecture architecture(std::size_t teacher_dim) const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Strict parse: unknown keys or wrong types raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);
/// Applies "key=value" on top of `c`, type-checked against the field.
TrainConfig apply_override(const TrainConfig& c, const std::string& assignment);

struct MetricsRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  std::array<double, kTaskCount> losses{};
  std::array<double, kTaskCount> scaled{};
  std::array<double, kTaskCount> rates{};
  std::array<double, kTaskCount> lambdas{};
  double combined = 0.0;
  double lr = 0.0;
  std::size_t queue_fill = 0;
  double wall_time = 0.0;  // seconds since the run started; not serialized
};

/// One JSONL line. Wall time is left out so logs of identical runs are
/// byte-identical; it is reported in the run summary instead.
nlohmann::json to_json(const MetricsRecord& r);

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Owns params, optimizer, queue and balancer for one distillation run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const TeacherBank& bank, StudentInputs inputs);

  /// Continues from a checkpoint written by save_checkpoint. The checkpoint
  /// architecture must match `cfg`, otherwise ConsistencyError.
  static Trainer resume(const std::string& path, TrainConfig cfg, const TeacherBank& bank,
                        StudentInputs inputs);

  /// Runs one epoch; throws NumericsError naming the step on non-finite values.
  void run_epoch(const MetricsSink& sink = {});
  /// Runs epochs until `until_epoch` (exclusive) or the configured total.
  void run(const MetricsSink& sink = {}, std::size_t until_epoch = SIZE_MAX);
  bool finished() const { return epoch_ >= cfg_.epochs; }

  /// Replaces the initial parameters (fixtures). Only allowed before the first
  /// step; the architecture must match, otherwise ConsistencyError.
  void set_params(StudentParams params);

  /// Atomic write of params, optimizer, queue, balancer and RNG state.
  void save_checkpoint(const std::string& path) const;

  const TrainConfig& config() const { return cfg_; }
  const StudentParams& params() const { return params_; }
  const FeatureQueue& queue() const { return queue_; }
  const LossBalancer& balancer() const { return balancer_; }
  std::size_t epoch() const { return epoch_; }
  std::uint64_t step() const { return step_; }
  std::size_t steps_per_epoch() const;
  const MetricsRecord& last_record() const { return last_; }

  /// Active task indices in [CD, FD, SD, HND] order.
  const std::vector<std::size_t>& active_tasks() const { return active_; }

 private:
  MetricsRecord train_step(const std::vector<std::size_t>& img_rows,
                           const std::vector<std::size_t>& txt_rows, double lr);

  TrainConfig cfg_;
  TeacherBank bank_;
  StudentInputs inputs_;
  std::vector<std::vector<std::size_t>> captions_;
  std::vector<std::size_t> active_;
  StudentParams params_;
  OptimizerState opt_;
  FeatureQueue queue_;
  LossBalancer balancer_;
  SeededRng rng_;
  std::size_t epoch_ = 0;
  std::uint64_t step_ = 0;
  std::vector<double> epoch_loss_sum_;
  std::size_t epoch_steps_ = 0;
  MetricsRecord last_;
  std::chrono::steady_clock::time_point started_;
};

struct TrainResult {
  StudentParams params;
  std::vector<MetricsRecord> metrics;
};

/// Convenience wrapper: fresh Trainer, full run, all records collected.
TrainResult train(const TrainConfig& cfg, const TeacherBank& bank, const StudentInputs& inputs);

/// Inputs for `cfg` derived from the teacher bank (see make_student_inputs).
StudentInputs student_inputs_for(const TrainConfig& cfg, const TeacherBank& bank);

}  // namespace dsmd
