#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dsmd {

/// Central-difference derivative of `f` at `x` for every coordinate. `x` is
/// perturbed in place and restored.
std::vector<double> numeric_gradient(const std::function<double()>& f, std::span<double> x,
                                     double h = 1e-5);

/// max_i |a_i - n_i| / max(max|a|, max|n|, 1e-12).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric);

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Adds an error to one analytic gradient entry of this component
  /// ("CD", "FD", "SD", "HND" or "model") to prove the harness notices.
  std::optional<std::string> corrupt;
};

struct GradCheckResult {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t trials = 0;
  bool passed = true;
};

/// Checks the four distillation losses w.r.t. student embeddings and the full
/// model (towers + normalization + weighted losses) w.r.t. every parameter,
/// on `trials` random small instances each.
std::vector<GradCheckResult> run_grad_check(const GradCheckOptions& opts);

}  // namespace dsmd
