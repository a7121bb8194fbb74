#include "dsmd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dsmd/balancer.hpp"
#include "dsmd/embedding.hpp"
#include "dsmd/losses.hpp"
#include "dsmd/rng.hpp"
#include "dsmd/student.hpp"

namespace dsmd {

std::vector<double> numeric_gradient(const std::function<double()>& f, std::span<double> x,
                                     double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f();
    x[i] = orig - h;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

namespace {

EmbeddingMatrix random_unit(SeededRng& rng, std::size_t rows, std::size_t dim) {
  EmbeddingMatrix m(rows, dim);
  for (double& v : m.values()) v = rng.gaussian();
  return l2_normalize(m);
}

std::vector<double> concat(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  std::vector<double> out = a.values();
  out.insert(out.end(), b.values().begin(), b.values().end());
  return out;
}

struct LossInstance {
  EmbeddingMatrix s_v, s_t, t_v, t_t;
  FeatureQueue queue;
  double tau;
  double alpha;
};

LossInstance random_instance(SeededRng& rng) {
  const std::size_t batches[] = {2, 3, 4, 8};
  const std::size_t dims[] = {4, 8, 16};
  const std::size_t b = batches[rng.index(4)];
  const std::size_t d = dims[rng.index(3)];
  const double taus[] = {0.05, 0.2, 0.5, 1.0};
  LossInstance inst{random_unit(rng, b, d), random_unit(rng, b, d), random_unit(rng, b, d),
                    random_unit(rng, b, d), FeatureQueue(16, d), taus[rng.index(4)],
                    rng.uniform(0.0, 0.5)};
  const std::size_t fill = rng.index(17);
  if (fill > 0) inst.queue.push(random_unit(rng, fill, d), random_unit(rng, fill, d));
  return inst;
}

LossTerm loss_for(std::size_t task, const LossInstance& x) {
  switch (static_cast<Task>(task)) {
    case Task::CD: return contrastive_distillation(x.s_v, x.s_t, x.t_v, x.t_t, x.queue, x.tau);
    case Task::FD: return feature_distillation(x.s_v, x.t_v, x.s_t, x.t_t);
    case Task::SD: return similarity_distillation(x.s_v, x.t_v, x.s_t, x.t_t);
    case Task::HND: return hard_negative_distillation(x.s_v, x.s_t, x.t_v, x.t_t, x.alpha);
  }
  throw ConfigError("unknown task");
}

double check_loss(std::size_t task, SeededRng& rng, const GradCheckOptions& opts) {
  LossInstance inst = random_instance(rng);
  const LossTerm term = loss_for(task, inst);
  std::vector<double> analytic = concat(term.grad_s_v, term.grad_s_t);
  if (opts.corrupt && *opts.corrupt == kTaskNames[task]) analytic[0] += 0.1;

  auto f = [&] { return loss_for(task, inst).value; };
  auto num_v = numeric_gradient(f, inst.s_v.values(), opts.step);
  auto num_t = numeric_gradient(f, inst.s_t.values(), opts.step);
  num_v.insert(num_v.end(), num_t.begin(), num_t.end());
  return max_relative_error(analytic, num_v);
}

double check_model(SeededRng& rng, const GradCheckOptions& opts) {
  Architecture arch;
  arch.image = TowerArch{16, {12}, {}};
  arch.text = TowerArch{16, {12}, {}};
  arch.teacher_dim = 8;
  StudentParams params = init_params(arch, rng.next());
  const std::size_t b = 4;
  EmbeddingMatrix x_v(b, 16), x_t(b, 16);
  for (double& v : x_v.values()) v = rng.gaussian();
  for (double& v : x_t.values()) v = rng.gaussian();
  const EmbeddingMatrix t_v = random_unit(rng, b, 8);
  const EmbeddingMatrix t_t = random_unit(rng, b, 8);
  FeatureQueue queue(16, 8);
  queue.push(random_unit(rng, 12, 8), random_unit(rng, 12, 8));
  const double tau = 0.2, alpha = 0.3;
  std::vector<double> lambdas(kTaskCount);
  for (double& l : lambdas) l = rng.uniform(0.2, 2.0);

  auto objective = [&](const StudentBatchOutput& out, EmbeddingMatrix* gv, EmbeddingMatrix* gt) {
    const auto terms = compute_all(out.s_v, out.s_t, t_v, t_t, queue, tau, alpha);
    double total = 0.0;
    for (std::size_t m = 0; m < kTaskCount; ++m) {
      total += lambdas[m] * terms[m].value;
      if (gv) {
        for (std::size_t i = 0; i < gv->size(); ++i) {
          gv->values()[i] += lambdas[m] * terms[m].grad_s_v.values()[i];
          gt->values()[i] += lambdas[m] * terms[m].grad_s_t.values()[i];
        }
      }
    }
    return total;
  };

  const StudentBatchOutput out = forward(params, x_v, x_t);
  EmbeddingMatrix gv(b, 8), gt(b, 8);
  objective(out, &gv, &gt);
  const ParamGrads grads = backward(params, out, gv, gt);

  std::vector<double> analytic, numeric;
  auto f = [&] { return objective(forward(params, x_v, x_t), nullptr, nullptr); };
  grads.for_each_tensor([&](std::string_view, std::span<const double> g, bool) {
    analytic.insert(analytic.end(), g.begin(), g.end());
  });
  params.for_each_tensor([&](std::string_view, std::span<double> p, bool) {
    auto n = numeric_gradient(f, p, opts.step);
    numeric.insert(numeric.end(), n.begin(), n.end());
  });
  if (opts.corrupt && *opts.corrupt == "model") analytic[0] += 0.1;
  return max_relative_error(analytic, numeric);
}

}  // namespace

std::vector<GradCheckResult> run_grad_check(const GradCheckOptions& opts) {
  std::vector<GradCheckResult> results;
  for (std::size_t task = 0; task < kTaskCount; ++task) {
    results.push_back({std::string(kTaskNames[task]), 0.0, 0, true});
  }
  results.push_back({"model", 0.0, 0, true});
  if (opts.trials == 0) return results;

  SeededRng rng(opts.seed);
  for (std::size_t trial = 0; trial < opts.trials; ++trial) {
    for (std::size_t task = 0; task < kTaskCount; ++task) {
      results[task].max_rel_error = std::max(results[task].max_rel_error, check_loss(task, rng, opts));
      ++results[task].trials;
    }
    results.back().max_rel_error = std::max(results.back().max_rel_error, check_model(rng, opts));
    ++results.back().trials;
  }
  for (auto& r : results) r.passed = r.max_rel_error < opts.tolerance;
  return results;
}

}  // namespace dsmd
