#include "dsmd/balancer.hpp"

#include <algorithm>
#include <cmath>

#include "dsmd/embedding.hpp"
#include "dsmd/errors.hpp"

namespace dsmd {

namespace {
constexpr double kMinPrevLoss = 1e-12;
}

double scale_factor(std::span<const double> losses, ScalingMode mode) {
  if (mode == ScalingMode::off || losses.empty()) return 1.0;
  const double top = *std::max_element(losses.begin(), losses.end());
  if (top <= 0.0) return 1.0;
  return std::max(1.0, std::log(top));
}

std::vector<double> scale_losses(std::span<const double> losses, ScalingMode mode) {
  std::vector<double> out(losses.begin(), losses.end());
  const double factor = scale_factor(losses, mode);
  if (factor != 1.0) {
    for (double& l : out) l *= factor;
  }
  return out;
}

LossBalancer::LossBalancer(std::size_t n_tasks, double temperature, double weight_sum)
    : n_tasks_(n_tasks),
      temperature_(temperature),
      weight_sum_(weight_sum),
      rates_(n_tasks, 1.0),
      lambdas_(n_tasks, n_tasks > 0 ? weight_sum / static_cast<double>(n_tasks) : 0.0) {
  if (n_tasks == 0) throw ConfigError("balancer needs at least one task");
  if (!(temperature > 0.0)) throw ConfigError("balancer temperature must be > 0");
  if (!(weight_sum > 0.0)) throw ConfigError("balancer weight sum K must be > 0");
}

const std::vector<double>& LossBalancer::update_weights(std::span<const double> current) {
  if (current.size() != n_tasks_) throw ShapeError("update_weights: wrong number of losses");
  for (double l : current) {
    if (!std::isfinite(l) || l < 0.0) throw NumericsError("update_weights: loss must be finite and >= 0");
  }
  for (std::size_t m = 0; m < n_tasks_; ++m) {
    rates_[m] = (prev_ && (*prev_)[m] >= kMinPrevLoss) ? current[m] / (*prev_)[m] : 1.0;
  }
  const auto p = stable_softmax(rates_, temperature_);
  for (std::size_t m = 0; m < n_tasks_; ++m) lambdas_[m] = weight_sum_ * p[m];
  prev_.emplace(current.begin(), current.end());
  return lambdas_;
}

void LossBalancer::restore(std::optional<std::vector<double>> prev, std::vector<double> rates,
                           std::vector<double> lambdas) {
  if ((prev && prev->size() != n_tasks_) || rates.size() != n_tasks_ || lambdas.size() != n_tasks_) {
    throw ShapeError("balancer restore: wrong vector length");
  }
  prev_ = std::move(prev);
  rates_ = std::move(rates);
  lambdas_ = std::move(lambdas);
}

double combine(std::span<const double> lambdas, std::span<const double> losses) {
  if (lambdas.size() != losses.size()) throw ShapeError("combine: length mismatch");
  double total = 0.0;
  for (std::size_t m = 0; m < losses.size(); ++m) total += lambdas[m] * losses[m];
  return total;
}

}  // namespace dsmd
