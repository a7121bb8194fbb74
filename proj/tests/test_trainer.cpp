#include <cmath>
#include <numeric>
#include <doctest.h>

#include "dsmd/embedding.hpp"
#include "dsmd/errors.hpp"
#include "dsmd/trainer.hpp"
#include "test_util.hpp"

using namespace dsmd;

namespace {

TeacherBank small_bank(std::size_t n_images = 96, std::size_t captions = 3) {
  SyntheticTeacherConfig c;
  c.n_images = n_images;
  c.captions_per_image = captions;
  c.dim = 12;
  c.n_clusters = 6;
  return generate_synthetic(c);
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 16;
  c.base_lr = 1e-3;
  c.decay_epoch = 2;
  c.queue_size = 40;
  c.input_dim = 10;
  c.hidden_dims = {8};
  c.seed = 3;
  return c;
}

std::vector<std::string> json_lines(const std::vector<MetricsRecord>& recs) {
  std::vector<std::string> out;
  for (const auto& r : recs) out.push_back(to_json(r).dump());
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config json round trip and strictness") {
  TrainConfig c = small_config();
  c.scaling = ScalingMode::off;
  c.schedule = ScheduleMode::linear;
  c.balancer_granularity = BalancerGranularity::epoch;
  c.loss_mask = "1010";
  const auto j = to_json(c);
  CHECK(to_json(train_config_from_json(j)) == j);

  auto bad = j;
  bad["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(bad), ConfigError);
  bad = j;
  bad["tau"] = "fast";
  CHECK_THROWS_AS(train_config_from_json(bad), ConfigError);
  bad = j;
  bad["balancer"] = "maybe";
  CHECK_THROWS_AS(train_config_from_json(bad), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json::array()), ConfigError);

  // A partial object fills the remaining fields from defaults.
  CHECK(train_config_from_json(nlohmann::json{{"tau", 0.2}}).tau == 0.2);
  CHECK(train_config_from_json(nlohmann::json::object()).queue_size == 8192);
}

TEST_CASE("defaults follow the reported hyperparameters") {
  const TrainConfig c;
  CHECK(c.base_lr == 1e-4);
  CHECK(c.weight_decay == 1e-4);
  CHECK(c.batch_size == 64);
  CHECK(c.queue_size == 8192);
  CHECK(c.balancer_temperature == 1.0);
  CHECK(c.tau == 0.05);
  CHECK(c.alpha == 0.0);
  CHECK(c.epochs == 20);
  CHECK(c.decay_epoch == 10);
  CHECK(c.decay_rate == 0.1);
  CHECK(c.balancer_k == 4.0);
}

TEST_CASE("overrides are type checked") {
  const TrainConfig c;
  CHECK_FALSE(apply_override(c, "balancer=off").balancer);
  CHECK(apply_override(c, "tau=0.2").tau == 0.2);
  CHECK(apply_override(c, "loss_mask=0110").loss_mask == "0110");
  CHECK(apply_override(c, "hidden_dims=[16,8]").hidden_dims == std::vector<std::size_t>{16, 8});
  CHECK(apply_override(c, "scaling=off").scaling == ScalingMode::off);
  CHECK_THROWS_AS(apply_override(c, "nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "tau"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "tau=abc"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "epochs=-1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "loss_mask=0000"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "batch_size=1"), ConfigError);
}

TEST_CASE("identical runs give identical logs and params") {
  const auto bank = small_bank();
  const auto cfg = small_config();
  const auto inputs = student_inputs_for(cfg, bank);
  const auto a = train(cfg, bank, inputs);
  const auto b = train(cfg, bank, inputs);
  CHECK(json_lines(a.metrics) == json_lines(b.metrics));
  CHECK(a.params == b.params);

  auto other = cfg;
  other.seed = 4;
  CHECK_FALSE(train(other, bank, inputs).params == a.params);
}

TEST_CASE("record invariants over a run") {
  const auto bank = small_bank();
  for (const char* gran : {"step", "epoch"}) {
    auto cfg = apply_override(small_config(), std::string("balancer_granularity=") + gran);
    cfg.epochs = 5;
    const auto res = train(cfg, bank, student_inputs_for(cfg, bank));
    const std::size_t spe = 96 / 16;
    REQUIRE(res.metrics.size() == cfg.epochs * spe);
    for (std::size_t i = 0; i < res.metrics.size(); ++i) {
      const auto& r = res.metrics[i];
      CHECK(r.step == i);
      CHECK(r.epoch == i / spe);
      CHECK(std::abs(std::accumulate(r.lambdas.begin(), r.lambdas.end(), 0.0) - cfg.balancer_k) < 1e-9);
      CHECK(r.lr == lr_at(r.epoch, cfg.base_lr, cfg.decay_epoch, cfg.decay_rate, cfg.schedule, cfg.epochs));
      CHECK(r.queue_fill == std::min<std::size_t>((i + 1) * cfg.batch_size, cfg.queue_size));
      CHECK(std::isfinite(r.combined));
      double combined = 0;
      for (std::size_t m = 0; m < kTaskCount; ++m) combined += r.lambdas[m] * r.scaled[m];
      CHECK(r.combined == doctest::Approx(combined).epsilon(1e-12));
    }
    CHECK(res.metrics[0].lambdas == std::array<double, 4>{1, 1, 1, 1});
  }
}

TEST_CASE("balancer off logs unit weights") {
  const auto bank = small_bank();
  const auto cfg = apply_override(small_config(), "balancer=off");
  for (const auto& r : train(cfg, bank, student_inputs_for(cfg, bank)).metrics) {
    CHECK(r.lambdas == std::array<double, 4>{1, 1, 1, 1});
  }
}

TEST_CASE("masked tasks carry zero weight") {
  const auto bank = small_bank();
  auto cfg = apply_override(small_config(), "loss_mask=1010");
  cfg.balancer_k = 2.0;
  for (const auto& r : train(cfg, bank, student_inputs_for(cfg, bank)).metrics) {
    CHECK(r.lambdas[1] == 0.0);
    CHECK(r.lambdas[3] == 0.0);
    CHECK(r.lambdas[0] + r.lambdas[2] == doctest::Approx(2.0).epsilon(1e-12));
  }
}

TEST_CASE("L1-only identity fixture decreases the loss every step") {
  // One affine layer at teacher width, initialized to the identity, fed noisy
  // teacher rows. Every image is in every (full) batch.
  SyntheticTeacherConfig bc;
  bc.n_images = 64;
  bc.captions_per_image = 1;
  bc.dim = 12;
  bc.n_clusters = 4;
  const auto bank = generate_synthetic(bc);

  TrainConfig cfg;
  cfg.loss_mask = "0100";
  cfg.input_dim = 12;
  cfg.hidden_dims = {};
  cfg.batch_size = 64;
  cfg.epochs = 10;
  cfg.base_lr = 1e-3;
  cfg.decay_epoch = 100;

  SeededRng rng(5);
  StudentInputs inputs{bank.image_feats, bank.text_feats};
  for (auto* m : {&inputs.image, &inputs.text})
    for (double& v : m->values()) v += 0.3 * rng.gaussian();

  Trainer t(cfg, bank, inputs);
  StudentParams p = t.params();
  for (Tower* tower : {&p.image, &p.text}) {
    auto& w = tower->layers[0].weight;
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j) w(i, j) = i == j ? 1.0 : 0.0;
  }
  t.set_params(p);
  std::vector<double> combined;
  t.run([&](const MetricsRecord& r) { combined.push_back(r.combined); });
  REQUIRE(combined.size() == 10);
  for (std::size_t i = 1; i < combined.size(); ++i) CHECK(combined[i] < combined[i - 1]);

  StudentParams wrong = init_params(apply_override(cfg, "hidden_dims=[4]").architecture(12), 0);
  CHECK_THROWS_AS(t.set_params(wrong), ConsistencyError);
}

TEST_CASE("checkpoint round trip and resume equivalence") {
  testutil::TempDir dir;
  const auto bank = small_bank();
  auto cfg = small_config();
  cfg.epochs = 6;
  cfg.decay_epoch = 3;
  const auto inputs = student_inputs_for(cfg, bank);

  Trainer straight(cfg, bank, inputs);
  std::vector<std::string> straight_log;
  straight.run([&](const MetricsRecord& r) { straight_log.push_back(to_json(r).dump()); });
  straight.save_checkpoint(dir.file("straight.dsmc"));

  Trainer first(cfg, bank, inputs);
  std::vector<std::string> log;
  auto sink = [&](const MetricsRecord& r) { log.push_back(to_json(r).dump()); };
  first.run(sink, 4);
  CHECK(first.epoch() == 4);
  first.save_checkpoint(dir.file("mid.dsmc"));

  Trainer second = Trainer::resume(dir.file("mid.dsmc"), cfg, bank, inputs);
  CHECK(second.params() == first.params());
  CHECK(second.step() == first.step());
  CHECK(second.queue().image_rows() == first.queue().image_rows());
  second.run(sink);
  second.save_checkpoint(dir.file("resumed.dsmc"));

  CHECK(log == straight_log);
  CHECK(second.params() == straight.params());
  CHECK(testutil::read_bytes(dir.file("resumed.dsmc")) == testutil::read_bytes(dir.file("straight.dsmc")));
}

TEST_CASE("resume in epoch granularity keeps the balancer state") {
  testutil::TempDir dir;
  const auto bank = small_bank();
  auto cfg = apply_override(small_config(), "balancer_granularity=epoch");
  const auto inputs = student_inputs_for(cfg, bank);
  Trainer a(cfg, bank, inputs);
  a.run();
  Trainer b(cfg, bank, inputs);
  b.run({}, 2);
  b.save_checkpoint(dir.file("c.dsmc"));
  Trainer c = Trainer::resume(dir.file("c.dsmc"), cfg, bank, inputs);
  c.run();
  CHECK(c.params() == a.params());
  CHECK(c.balancer().lambdas() == a.balancer().lambdas());
}

TEST_CASE("resume guards") {
  testutil::TempDir dir;
  const auto bank = small_bank();
  const auto cfg = small_config();
  const auto inputs = student_inputs_for(cfg, bank);
  Trainer t(cfg, bank, inputs);
  t.run({}, 1);
  t.save_checkpoint(dir.file("c.dsmc"));

  auto wider = apply_override(cfg, "hidden_dims=[9]");
  CHECK_THROWS_AS(Trainer::resume(dir.file("c.dsmc"), wider, bank, inputs), ConsistencyError);
  auto unnormalized = apply_override(cfg, "l2_norm=off");
  CHECK_THROWS_AS(Trainer::resume(dir.file("c.dsmc"), unnormalized, bank, inputs), ConsistencyError);
  auto masked = apply_override(cfg, "loss_mask=1100");
  CHECK_THROWS_AS(Trainer::resume(dir.file("c.dsmc"), masked, bank, inputs), ConsistencyError);
  auto queue = apply_override(cfg, "queue_size=20");
  CHECK_THROWS_AS(Trainer::resume(dir.file("c.dsmc"), queue, bank, inputs), ConsistencyError);

  auto bytes = testutil::read_bytes(dir.file("c.dsmc"));
  bytes.resize(bytes.size() - 16);
  testutil::write_bytes(dir.file("short.dsmc"), bytes);
  CHECK_THROWS_AS(Trainer::resume(dir.file("short.dsmc"), cfg, bank, inputs), FormatError);

  save_params(dir.file("params.dsmc"), t.params());
  CHECK_THROWS_AS(Trainer::resume(dir.file("params.dsmc"), cfg, bank, inputs), FormatError);
}

TEST_CASE("trainer input guards") {
  const auto bank = small_bank();
  auto cfg = small_config();
  auto inputs = student_inputs_for(cfg, bank);
  auto big = cfg;
  big.batch_size = 200;
  CHECK_THROWS_AS(Trainer(big, bank, inputs), ConfigError);
  auto dims = cfg;
  dims.input_dim = 11;
  CHECK_THROWS_AS(Trainer(dims, bank, inputs), ShapeError);
}

TEST_CASE("queue capacity is capped at the number of images") {
  const auto bank = small_bank();
  auto cfg = small_config();
  cfg.queue_size = 8192;
  Trainer t(cfg, bank, student_inputs_for(cfg, bank));
  CHECK(t.queue().capacity() == 96);
}

TEST_CASE("non-finite loss aborts with the step number") {
  const auto bank = small_bank();
  auto cfg = small_config();
  auto inputs = student_inputs_for(cfg, bank);
  inputs.image(5, 0) = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < inputs.image.rows(); ++r) inputs.image(r, 1) = 1e308;
  Trainer t(cfg, bank, inputs);
  try {
    t.run();
    FAIL("expected NumericsError");
  } catch (const NumericsError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("training lowers the objective on the standard benchmark") {
  // Compare initial and final parameters on the same fixed batches, against
  // the same (final) queue, with every loss unweighted.
  const auto bank = generate_synthetic({});
  const TrainConfig cfg;
  const auto inputs = student_inputs_for(cfg, bank);
  Trainer t(cfg, bank, inputs);
  const StudentParams initial = t.params();
  t.run();

  auto objective = [&](const StudentParams& p) {
    double total = 0;
    for (std::size_t b = 0; b + cfg.batch_size <= bank.image_feats.rows(); b += cfg.batch_size) {
      std::vector<std::size_t> img(cfg.batch_size), txt(cfg.batch_size);
      for (std::size_t k = 0; k < cfg.batch_size; ++k) {
        img[k] = b + k;
        txt[k] = 5 * (b + k);
      }
      const auto out = forward(p, inputs.image.gather(img), inputs.text.gather(txt));
      const auto terms = compute_all(out.s_v, out.s_t, bank.image_feats.gather(img), bank.text_feats.gather(txt),
                                     t.queue(), cfg.tau, cfg.alpha);
      for (const auto& term : terms) total += term.value;
    }
    return total;
  };
  CHECK(objective(t.params()) < objective(initial));
}

}  // TEST_SUITE
