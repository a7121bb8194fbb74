#pragma once

#include <optional>
#include <span>
#include <vector>

namespace dsmd {

enum class ScalingMode { literal, off };

/// max(1, ln(max_i L_i)) in literal mode (1 if every loss is zero); 1 when off.
double scale_factor(std::span<const double> losses, ScalingMode mode);

/// Multiplies every loss by max(1, ln(max_i L_i)) in literal mode; identity
/// when off. An all-zero vector is returned unchanged.
std::vector<double> scale_losses(std::span<const double> losses, ScalingMode mode);

/// Loss-change driven task weights:
///   w_m    = L_m(t) / L_m(t-1)   (1 on the first update or when L_m(t-1) < 1e-12)
///   lambda = K * softmax(w / T)
class LossBalancer {
 public:
  LossBalancer(std::size_t n_tasks, double temperature, double weight_sum);

  /// Computes new weights from the current losses and remembers them as the
  /// previous losses. Throws NumericsError on non-finite or negative input.
  const std::vector<double>& update_weights(std::span<const double> current_losses);

  std::size_t n_tasks() const { return n_tasks_; }
  double temperature() const { return temperature_; }
  double weight_sum() const { return weight_sum_; }
  const std::vector<double>& lambdas() const { return lambdas_; }
  const std::vector<double>& rates() const { return rates_; }
  const std::optional<std::vector<double>>& previous_losses() const { return prev_; }

  /// Restores a snapshot (used by checkpoint resume).
  void restore(std::optional<std::vector<double>> prev, std::vector<double> rates,
               std::vector<double> lambdas);

 private:
  std::size_t n_tasks_;
  double temperature_;
  double weight_sum_;
  std::optional<std::vector<double>> prev_;
  std::vector<double> rates_;
  std::vector<double> lambdas_;
};

/// sum_m lambda_m * L_m.
double combine(std::span<const double> lambdas, std::span<const double> losses);

}  // namespace dsmd
