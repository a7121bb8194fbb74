#include "dsmd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json_util.hpp"

namespace dsmd {

// ---------------------------------------------------------------------------
// Config

namespace {

constexpr std::initializer_list<const char*> kConfigKeys = {
    "epochs",       "batch_size",   "base_lr",
    "weight_decay", "tau",          "queue_size",
    "alpha",        "balancer_temperature", "balancer_k",
    "decay_epoch",  "decay_rate",   "seed",
    "scaling",      "balancer",     "l2_norm",
    "loss_mask",    "schedule",     "balancer_granularity",
    "input_dim",    "hidden_dims",  "head_hidden_dims",
    "input_noise",  "input_seed"};

bool parse_switch(const nlohmann::json& j, const char* key, bool current) {
  auto it = j.find(key);
  if (it == j.end()) return current;
  if (it->is_boolean()) return it->get<bool>();
  if (it->is_string()) {
    if (*it == "on") return true;
    if (*it == "off") return false;
  }
  throw ConfigError(std::string("config key '") + key + "' must be \"on\" or \"off\"");
}

template <typename Enum>
Enum parse_enum(const nlohmann::json& j, const char* key, Enum current,
                std::initializer_list<std::pair<const char*, Enum>> names) {
  auto it = j.find(key);
  if (it == j.end()) return current;
  if (it->is_string()) {
    for (const auto& [name, value] : names) {
      if (*it == name) return value;
    }
  }
  std::string allowed;
  for (const auto& [name, _] : names) allowed += std::string(allowed.empty() ? "" : ", ") + name;
  throw ConfigError(std::string("config key '") + key + "' must be one of: " + allowed);
}

void read_dims(const nlohmann::json& j, const char* key, std::vector<std::size_t>& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array()) throw ConfigError(std::string("config key '") + key + "' must be a list");
  std::vector<std::size_t> dims;
  for (const auto& v : *it) {
    if (!v.is_number_unsigned()) throw ConfigError(std::string("config key '") + key + "' needs non-negative integers");
    dims.push_back(v.get<std::size_t>());
  }
  out = std::move(dims);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (queue_size == 0) throw ConfigError("queue_size must be >= 1");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(balancer_temperature > 0.0)) throw ConfigError("balancer_temperature must be > 0");
  if (!(balancer_k > 0.0)) throw ConfigError("balancer_k must be > 0");
  if (!(decay_rate > 0.0)) throw ConfigError("decay_rate must be > 0");
  if (loss_mask.size() != kTaskCount ||
      loss_mask.find_first_not_of("01") != std::string::npos) {
    throw ConfigError("loss_mask must be 4 characters of 0/1 (CD FD SD HND)");
  }
  if (loss_mask.find('1') == std::string::npos) throw ConfigError("loss_mask enables no loss");
  if (input_dim == 0) throw ConfigError("input_dim must be >= 1");
  if (!(input_noise >= 0.0)) throw ConfigError("input_noise must be >= 0");
  for (std::size_t d : hidden_dims) {
    if (d == 0) throw ConfigError("hidden_dims entries must be >= 1");
  }
  for (std::size_t d : head_hidden_dims) {
    if (d == 0) throw ConfigError("head_hidden_dims entries must be >= 1");
  }
}

Architecture TrainConfig::architecture(std::size_t teacher_dim) const {
  Architecture a;
  a.image = TowerArch{input_dim, hidden_dims, head_hidden_dims};
  a.text = a.image;
  a.teacher_dim = teacher_dim;
  a.normalize_output = l2_norm;
  return a;
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"base_lr", c.base_lr},
      {"weight_decay", c.weight_decay},
      {"tau", c.tau},
      {"queue_size", c.queue_size},
      {"alpha", c.alpha},
      {"balancer_temperature", c.balancer_temperature},
      {"balancer_k", c.balancer_k},
      {"decay_epoch", c.decay_epoch},
      {"decay_rate", c.decay_rate},
      {"seed", c.seed},
      {"scaling", c.scaling == ScalingMode::literal ? "literal" : "off"},
      {"balancer", c.balancer ? "on" : "off"},
      {"l2_norm", c.l2_norm ? "on" : "off"},
      {"loss_mask", c.loss_mask},
      {"schedule", c.schedule == ScheduleMode::step ? "step" : "linear"},
      {"balancer_granularity", c.balancer_granularity == BalancerGranularity::step ? "step" : "epoch"},
      {"input_dim", c.input_dim},
      {"hidden_dims", c.hidden_dims},
      {"head_hidden_dims", c.head_hidden_dims},
      {"input_noise", c.input_noise},
      {"input_seed", c.input_seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  jsonutil::require_object(j, "train config");
  jsonutil::reject_unknown(j, kConfigKeys, "train config");
  TrainConfig c;
  jsonutil::read(j, "epochs", c.epochs);
  jsonutil::read(j, "batch_size", c.batch_size);
  jsonutil::read(j, "base_lr", c.base_lr);
  jsonutil::read(j, "weight_decay", c.weight_decay);
  jsonutil::read(j, "tau", c.tau);
  jsonutil::read(j, "queue_size", c.queue_size);
  jsonutil::read(j, "alpha", c.alpha);
  jsonutil::read(j, "balancer_temperature", c.balancer_temperature);
  jsonutil::read(j, "balancer_k", c.balancer_k);
  jsonutil::read(j, "decay_epoch", c.decay_epoch);
  jsonutil::read(j, "decay_rate", c.decay_rate);
  jsonutil::read(j, "seed", c.seed);
  c.scaling = parse_enum(j, "scaling", c.scaling,
                         {{"literal", ScalingMode::literal}, {"off", ScalingMode::off}});
  c.balancer = parse_switch(j, "balancer", c.balancer);
  c.l2_norm = parse_switch(j, "l2_norm", c.l2_norm);
  jsonutil::read(j, "loss_mask", c.loss_mask);
  c.schedule = parse_enum(j, "schedule", c.schedule,
                          {{"step", ScheduleMode::step}, {"linear", ScheduleMode::linear}});
  c.balancer_granularity =
      parse_enum(j, "balancer_granularity", c.balancer_granularity,
                 {{"step", BalancerGranularity::step}, {"epoch", BalancerGranularity::epoch}});
  jsonutil::read(j, "input_dim", c.input_dim);
  read_dims(j, "hidden_dims", c.hidden_dims);
  read_dims(j, "head_hidden_dims", c.head_hidden_dims);
  jsonutil::read(j, "input_noise", c.input_noise);
  jsonutil::read(j, "input_seed", c.input_seed);
  c.validate();
  return c;
}

TrainConfig apply_override(const TrainConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json j = to_json(c);
  if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  if (j[key].is_string()) {
    j[key] = raw;
  } else {
    try {
      j[key] = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("override value for '" + key + "' does not parse: " + raw);
    }
  }
  return train_config_from_json(j);
}

nlohmann::json to_json(const MetricsRecord& r) {
  return nlohmann::json{{"step", r.step},     {"epoch", r.epoch},       {"losses", r.losses},
                        {"scaled", r.scaled}, {"w", r.rates},           {"lambda", r.lambdas},
                        {"combined", r.combined}, {"lr", r.lr},        {"queue_fill", r.queue_fill}};
}

StudentInputs student_inputs_for(const TrainConfig& cfg, const TeacherBank& bank) {
  return make_student_inputs(bank, cfg.input_dim, cfg.input_noise, cfg.input_seed);
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::vector<std::size_t> active_from_mask(const TrainConfig& cfg) {
  std::vector<std::size_t> out;
  for (std::size_t m = 0; m < kTaskCount; ++m) {
    if (cfg.task_enabled(static_cast<Task>(m))) out.push_back(m);
  }
  return out;
}

std::size_t queue_capacity(const TrainConfig& cfg, const TeacherBank& bank) {
  return std::min(cfg.queue_size, bank.image_feats.rows());
}

void add_scaled(EmbeddingMatrix& acc, const EmbeddingMatrix& g, double coef) {
  auto& a = acc.values();
  const auto& b = g.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += coef * b[i];
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const TeacherBank& bank, StudentInputs inputs)
    : cfg_((cfg.validate(), std::move(cfg))),
      bank_(bank),
      inputs_(std::move(inputs)),
      captions_(bank_.captions_by_image()),
      active_(active_from_mask(cfg_)),
      params_(init_params(cfg_.architecture(bank_.dim()), SeededRng(cfg_.seed).next())),
      opt_(OptimizerState::fresh(params_)),
      queue_(queue_capacity(cfg_, bank_), bank_.dim()),
      balancer_(active_.size(), cfg_.balancer_temperature, cfg_.balancer_k),
      rng_([&] {
        SeededRng root(cfg_.seed);
        root.next();
        return root.split();
      }()),
      epoch_loss_sum_(active_.size(), 0.0),
      started_(std::chrono::steady_clock::now()) {
  bank_.validate();
  if (inputs_.image.rows() != bank_.image_feats.rows() || inputs_.text.rows() != bank_.text_feats.rows()) {
    throw ShapeError("student inputs do not have one row per teacher row");
  }
  if (inputs_.image.dim() != cfg_.input_dim || inputs_.text.dim() != cfg_.input_dim) {
    throw ShapeError("student inputs do not match input_dim");
  }
  if (steps_per_epoch() == 0) throw ConfigError("batch_size exceeds the number of training pairs");
}

void Trainer::set_params(StudentParams params) {
  if (step_ != 0) throw ConsistencyError("set_params after training started");
  if (!(params.arch == params_.arch)) throw ConsistencyError("set_params: architecture mismatch");
  params_ = std::move(params);
  opt_ = OptimizerState::fresh(params_);
}

std::size_t Trainer::steps_per_epoch() const {
  std::size_t pairs = 0;
  for (const auto& c : captions_) pairs += c.empty() ? 0 : 1;
  return pairs / cfg_.batch_size;
}

MetricsRecord Trainer::train_step(const std::vector<std::size_t>& img_rows,
                                  const std::vector<std::size_t>& txt_rows, double lr) {
  const EmbeddingMatrix x_v = inputs_.image.gather(img_rows);
  const EmbeddingMatrix x_t = inputs_.text.gather(txt_rows);
  const EmbeddingMatrix t_v = bank_.image_feats.gather(img_rows);
  const EmbeddingMatrix t_t = bank_.text_feats.gather(txt_rows);

  StudentBatchOutput out;
  try {
    out = forward(params_, x_v, x_t);
  } catch (const NumericsError& e) {
    throw NumericsError(std::string(e.what()) + " at step " + std::to_string(step_));
  }
  const auto terms = compute_all(out.s_v, out.s_t, t_v, t_t, queue_, cfg_.tau, cfg_.alpha);

  const std::size_t n_active = active_.size();
  std::vector<double> raw(n_active);
  for (std::size_t i = 0; i < n_active; ++i) raw[i] = terms[active_[i]].value;
  const double factor = scale_factor(raw, cfg_.scaling);
  const std::vector<double> scaled = scale_losses(raw, cfg_.scaling);

  std::vector<double> lambdas(n_active, 1.0);
  std::vector<double> rates(n_active, 1.0);
  if (cfg_.balancer) {
    if (cfg_.balancer_granularity == BalancerGranularity::step) balancer_.update_weights(scaled);
    lambdas = balancer_.lambdas();
    rates = balancer_.rates();
  }
  const double combined = combine(lambdas, scaled);

  MetricsRecord rec;
  rec.step = step_;
  rec.epoch = epoch_;
  rec.lr = lr;
  rec.combined = combined;
  for (std::size_t m = 0; m < kTaskCount; ++m) rec.losses[m] = terms[m].value;
  for (std::size_t i = 0; i < n_active; ++i) {
    rec.scaled[active_[i]] = scaled[i];
    rec.rates[active_[i]] = rates[i];
    rec.lambdas[active_[i]] = lambdas[i];
  }
  if (!std::isfinite(combined)) {
    throw NumericsError("non-finite combined loss at step " + std::to_string(step_));
  }

  EmbeddingMatrix grad_v(out.s_v.rows(), out.s_v.dim());
  EmbeddingMatrix grad_t(out.s_t.rows(), out.s_t.dim());
  for (std::size_t i = 0; i < n_active; ++i) {
    const LossTerm& term = terms[active_[i]];
    add_scaled(grad_v, term.grad_s_v, lambdas[i] * factor);
    add_scaled(grad_t, term.grad_s_t, lambdas[i] * factor);
  }
  try {
    const ParamGrads grads = backward(params_, out, grad_v, grad_t);
    adamw_step(params_, grads, opt_, lr, cfg_.weight_decay);
  } catch (const NumericsError& e) {
    throw NumericsError(std::string(e.what()) + " at step " + std::to_string(step_));
  }
  queue_.push(t_v, t_t);

  for (std::size_t i = 0; i < n_active; ++i) epoch_loss_sum_[i] += scaled[i];
  ++epoch_steps_;
  ++step_;
  rec.queue_fill = queue_.fill();
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  return rec;
}

void Trainer::run_epoch(const MetricsSink& sink) {
  if (finished()) return;
  const double lr =
      lr_at(epoch_, cfg_.base_lr, cfg_.decay_epoch, cfg_.decay_rate, cfg_.schedule, cfg_.epochs);

  // Shuffle first, then one caption per image, both from the trainer stream.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < captions_.size(); ++i) {
    if (!captions_[i].empty()) order.push_back(i);
  }
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng_.index(i)]);
  }
  std::vector<std::size_t> caption(captions_.size(), 0);
  for (std::size_t i = 0; i < captions_.size(); ++i) {
    if (!captions_[i].empty()) caption[i] = captions_[i][rng_.index(captions_[i].size())];
  }

  const std::size_t batch = cfg_.batch_size;
  std::vector<std::size_t> img(batch), txt(batch);
  for (std::size_t b = 0; b < steps_per_epoch(); ++b) {
    for (std::size_t k = 0; k < batch; ++k) {
      img[k] = order[b * batch + k];
      txt[k] = caption[img[k]];
    }
    last_ = train_step(img, txt, lr);
    if (sink) sink(last_);
  }

  if (cfg_.balancer && cfg_.balancer_granularity == BalancerGranularity::epoch && epoch_steps_ > 0) {
    std::vector<double> mean(epoch_loss_sum_.size());
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = epoch_loss_sum_[i] / static_cast<double>(epoch_steps_);
    balancer_.update_weights(mean);
  }
  std::fill(epoch_loss_sum_.begin(), epoch_loss_sum_.end(), 0.0);
  epoch_steps_ = 0;
  ++epoch_;
}

void Trainer::run(const MetricsSink& sink, std::size_t until_epoch) {
  while (!finished() && epoch_ < until_epoch) run_epoch(sink);
}

void Trainer::save_checkpoint(const std::string& path) const {
  std::vector<double> payload;
  append_params(params_, payload);
  append_params(opt_.m, payload);
  append_params(opt_.v, payload);
  const EmbeddingMatrix qi = queue_.image_rows();
  const EmbeddingMatrix qt = queue_.text_rows();
  payload.insert(payload.end(), qi.values().begin(), qi.values().end());
  payload.insert(payload.end(), qt.values().begin(), qt.values().end());
  const bool has_prev = balancer_.previous_losses().has_value();
  if (has_prev) {
    const auto& prev = *balancer_.previous_losses();
    payload.insert(payload.end(), prev.begin(), prev.end());
  }
  payload.insert(payload.end(), balancer_.rates().begin(), balancer_.rates().end());
  payload.insert(payload.end(), balancer_.lambdas().begin(), balancer_.lambdas().end());

  const auto& s = rng_.state();
  nlohmann::json trainer{{"epoch", epoch_},
                         {"step", step_},
                         {"adam_step", opt_.step},
                         {"rng_state", {s[0], s[1], s[2], s[3]}},
                         {"queue_capacity", queue_.capacity()},
                         {"queue_fill", queue_.fill()},
                         {"balancer_tasks", balancer_.n_tasks()},
                         {"balancer_has_prev", has_prev}};
  write_container(path,
                  nlohmann::json{{"architecture", params_.arch}, {"config", to_json(cfg_)}, {"trainer", trainer}},
                  payload);
}

Trainer Trainer::resume(const std::string& path, TrainConfig cfg, const TeacherBank& bank,
                        StudentInputs inputs) {
  Container c = read_container(path);
  if (!c.descriptor.contains("trainer") || !c.descriptor.contains("architecture")) {
    throw FormatError(path + ": not a trainer checkpoint");
  }
  const Architecture saved = architecture_from_json(c.descriptor.at("architecture"));
  Trainer t(std::move(cfg), bank, std::move(inputs));
  if (!(saved == t.params_.arch)) {
    throw ConsistencyError(path + ": checkpoint architecture does not match the configuration");
  }
  try {
    const auto& tr = c.descriptor.at("trainer");
    if (tr.at("queue_capacity").get<std::size_t>() != t.queue_.capacity() ||
        tr.at("balancer_tasks").get<std::size_t>() != t.balancer_.n_tasks()) {
      throw ConsistencyError(path + ": queue or balancer layout does not match the configuration");
    }
    std::size_t off = take_params(t.params_, c.payload, 0);
    off = take_params(t.opt_.m, c.payload, off);
    off = take_params(t.opt_.v, c.payload, off);
    t.opt_.step = tr.at("adam_step").get<std::uint64_t>();

    const std::size_t fill = tr.at("queue_fill").get<std::size_t>();
    const std::size_t d = bank.dim();
    const std::size_t n_tasks = t.balancer_.n_tasks();
    const bool has_prev = tr.at("balancer_has_prev").get<bool>();
    const std::size_t need = off + 2 * fill * d + (has_prev ? n_tasks : 0) + 2 * n_tasks;
    if (c.payload.size() != need) throw FormatError(path + ": payload size does not match descriptor");
    auto take = [&](std::size_t n) {
      std::vector<double> v(c.payload.begin() + static_cast<std::ptrdiff_t>(off),
                            c.payload.begin() + static_cast<std::ptrdiff_t>(off + n));
      off += n;
      return v;
    };
    EmbeddingMatrix qi(fill, d, take(fill * d));
    EmbeddingMatrix qt(fill, d, take(fill * d));
    t.queue_ = FeatureQueue(t.queue_.capacity(), d);
    if (fill > 0) t.queue_.push(qi, qt);
    std::optional<std::vector<double>> prev;
    if (has_prev) prev = take(n_tasks);
    auto rates = take(n_tasks);
    auto lambdas = take(n_tasks);
    t.balancer_.restore(std::move(prev), std::move(rates), std::move(lambdas));

    const auto st = tr.at("rng_state").get<std::vector<std::uint64_t>>();
    if (st.size() != 4) throw FormatError(path + ": bad rng state");
    t.rng_.set_state({st[0], st[1], st[2], st[3]});
    t.epoch_ = tr.at("epoch").get<std::size_t>();
    t.step_ = tr.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt trainer descriptor: " + e.what());
  }
  return t;
}

TrainResult train(const TrainConfig& cfg, const TeacherBank& bank, const StudentInputs& inputs) {
  Trainer trainer(cfg, bank, inputs);
  TrainResult result;
  trainer.run([&](const MetricsRecord& r) { result.metrics.push_back(r); });
  result.params = trainer.params();
  return result;
}

}  // namespace dsmd
