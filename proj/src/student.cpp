#include "dsmd/student.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "binary_io.hpp"
#include "dsmd/embedding.hpp"
#include "dsmd/kernels.hpp"
#include "dsmd/rng.hpp"

namespace dsmd {

// ---------------------------------------------------------------------------
// Architecture

std::vector<std::size_t> Architecture::widths(const TowerArch& tower) const {
  std::vector<std::size_t> w{tower.input_dim};
  w.insert(w.end(), tower.hidden_dims.begin(), tower.hidden_dims.end());
  w.insert(w.end(), tower.head_hidden_dims.begin(), tower.head_hidden_dims.end());
  w.push_back(teacher_dim);
  return w;
}

void Architecture::validate() const {
  for (const TowerArch* t : {&image, &text}) {
    for (std::size_t w : widths(*t)) {
      if (w == 0) throw ConfigError("architecture has a zero-dimension layer");
    }
  }
}

void to_json(nlohmann::json& j, const TowerArch& t) {
  j = nlohmann::json{{"input_dim", t.input_dim},
                     {"hidden_dims", t.hidden_dims},
                     {"head_hidden_dims", t.head_hidden_dims}};
}

void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"image", a.image},
                     {"text", a.text},
                     {"teacher_dim", a.teacher_dim},
                     {"normalize_output", a.normalize_output}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  try {
    auto tower = [](const nlohmann::json& t) {
      TowerArch out;
      out.input_dim = t.at("input_dim").get<std::size_t>();
      out.hidden_dims = t.at("hidden_dims").get<std::vector<std::size_t>>();
      out.head_hidden_dims = t.at("head_hidden_dims").get<std::vector<std::size_t>>();
      return out;
    };
    Architecture a;
    a.image = tower(j.at("image"));
    a.text = tower(j.at("text"));
    a.teacher_dim = j.at("teacher_dim").get<std::size_t>();
    a.normalize_output = j.at("normalize_output").get<bool>();
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("architecture descriptor: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tower zero_tower(const Architecture& arch, const TowerArch& t) {
  const auto w = arch.widths(t);
  Tower tower;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    tower.layers.push_back(Layer{EmbeddingMatrix(w[i + 1], w[i]), std::vector<double>(w[i + 1], 0.0)});
  }
  return tower;
}

template <typename Params, typename Fn>
void visit_tensors(Params& p, Fn&& fn) {
  const char* prefixes[] = {"image", "text"};
  std::array towers{&p.image, &p.text};
  for (int t = 0; t < 2; ++t) {
    auto& layers = towers[t]->layers;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = std::string(prefixes[t]) + ".layer" + std::to_string(l);
      fn(base + ".weight", std::span(layers[l].weight.values()), true);
      fn(base + ".bias", std::span(layers[l].bias), false);
    }
  }
}

}  // namespace

StudentParams StudentParams::zeros_like() const {
  return StudentParams{arch, zero_tower(arch, arch.image), zero_tower(arch, arch.text)};
}

std::size_t StudentParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](std::string_view, std::span<const double> v, bool) { n += v.size(); });
  return n;
}

void StudentParams::for_each_tensor(
    const std::function<void(std::string_view, std::span<double>, bool)>& fn) {
  visit_tensors(*this, [&](const std::string& name, std::span<double> v, bool w) { fn(name, v, w); });
}

void StudentParams::for_each_tensor(
    const std::function<void(std::string_view, std::span<const double>, bool)>& fn) const {
  visit_tensors(*this,
                [&](const std::string& name, std::span<const double> v, bool w) { fn(name, v, w); });
}

StudentParams init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  StudentParams p{arch, zero_tower(arch, arch.image), zero_tower(arch, arch.text)};
  SeededRng rng(seed);
  for (Tower* tower : {&p.image, &p.text}) {
    for (Layer& layer : tower->layers) {
      const double fan_out = static_cast<double>(layer.weight.rows());
      const double fan_in = static_cast<double>(layer.weight.dim());
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& w : layer.weight.values()) w = rng.uniform(-bound, bound);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

EmbeddingMatrix affine(const EmbeddingMatrix& x, const Layer& layer) {
  EmbeddingMatrix z = kernels::matmul_nt(x, layer.weight);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
  }
  return z;
}

EmbeddingMatrix run_tower(const Tower& tower, bool normalize, const EmbeddingMatrix& x,
                          TowerCache* cache) {
  if (x.dim() != tower.layers.front().weight.dim()) {
    throw ShapeError("student input has dim " + std::to_string(x.dim()) + ", tower expects " +
                     std::to_string(tower.layers.front().weight.dim()));
  }
  EmbeddingMatrix a = x;
  const std::size_t n = tower.layers.size();
  for (std::size_t l = 0; l < n; ++l) {
    EmbeddingMatrix z = affine(a, tower.layers[l]);
    if (cache) cache->layer_inputs.push_back(std::move(a));
    if (l + 1 < n) {
      for (double& v : z.values()) v = std::tanh(v);
    }
    a = std::move(z);
  }
  a.require_finite("student output");
  if (!normalize) {
    if (cache) {
      cache->pre_norm = a;
      cache->norms.assign(a.rows(), 1.0);
    }
    return a;
  }
  auto norms = kernels::row_norms(a);
  for (std::size_t r = 0; r < norms.size(); ++r) {
    if (!(norms[r] >= kZeroNormThreshold)) throw ZeroVectorError(r);
  }
  EmbeddingMatrix s = a;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (double& v : s.row(r)) v /= norms[r];
  }
  if (cache) {
    cache->pre_norm = std::move(a);
    cache->norms = std::move(norms);
  }
  return s;
}

void tower_backward(const Tower& tower, const TowerCache& cache, EmbeddingMatrix grad_z,
                    Tower& grads) {
  const std::size_t n = tower.layers.size();
  for (std::size_t l = n; l-- > 0;) {
    const EmbeddingMatrix& input = cache.layer_inputs[l];
    Layer& g = grads.layers[l];
    g.weight = kernels::matmul_tn(grad_z, input);
    std::fill(g.bias.begin(), g.bias.end(), 0.0);
    for (std::size_t r = 0; r < grad_z.rows(); ++r) {
      auto row = grad_z.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) g.bias[c] += row[c];
    }
    if (l == 0) break;
    EmbeddingMatrix grad_a = kernels::matmul_nn(grad_z, tower.layers[l].weight);
    // input of layer l is tanh output of layer l-1
    auto& ga = grad_a.values();
    const auto& a = input.values();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - a[i] * a[i];
    grad_z = std::move(grad_a);
  }
}

}  // namespace

StudentBatchOutput forward(const StudentParams& params, const EmbeddingMatrix& x_v,
                           const EmbeddingMatrix& x_t) {
  StudentBatchOutput out;
  const bool norm = params.arch.normalize_output;
  out.s_v = run_tower(params.image, norm, x_v, &out.image_cache);
  out.s_t = run_tower(params.text, norm, x_t, &out.text_cache);
  return out;
}

EmbeddingMatrix encode(const StudentParams& params, Modality modality, const EmbeddingMatrix& x) {
  const Tower& tower = modality == Modality::image ? params.image : params.text;
  return run_tower(tower, params.arch.normalize_output, x, nullptr);
}

EmbeddingMatrix normalization_backward(const EmbeddingMatrix& s, std::span<const double> norms,
                                       const EmbeddingMatrix& grad_s) {
  require_same_shape(s, grad_s, "normalization_backward");
  EmbeddingMatrix g(s.rows(), s.dim());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto sr = s.row(r);
    auto gr = grad_s.row(r);
    const double proj = dot(sr, gr);
    auto out = g.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (gr[c] - sr[c] * proj) / norms[r];
  }
  return g;
}

ParamGrads backward(const StudentParams& params, const StudentBatchOutput& out,
                    const EmbeddingMatrix& grad_s_v, const EmbeddingMatrix& grad_s_t) {
  require_same_shape(out.s_v, grad_s_v, "backward (image)");
  require_same_shape(out.s_t, grad_s_t, "backward (text)");
  if (out.image_cache.layer_inputs.size() != params.image.layers.size() ||
      out.text_cache.layer_inputs.size() != params.text.layers.size()) {
    throw ShapeError("backward: cache does not match parameters");
  }
  ParamGrads grads = params.zeros_like();
  const bool norm = params.arch.normalize_output;
  tower_backward(params.image, out.image_cache,
                 norm ? normalization_backward(out.s_v, out.image_cache.norms, grad_s_v) : grad_s_v,
                 grads.image);
  tower_backward(params.text, out.text_cache,
                 norm ? normalization_backward(out.s_t, out.text_cache.norms, grad_s_t) : grad_s_t,
                 grads.text);
  return grads;
}

// ---------------------------------------------------------------------------
// AdamW and schedule

OptimizerState OptimizerState::fresh(const StudentParams& params) {
  return OptimizerState{params.zeros_like(), params.zeros_like(), 0};
}

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t t, double lr, double weight_decay,
                  const AdamWHyper& h) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
    throw ShapeError("adamw_update: tensor sizes differ");
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    theta[i] -= lr * weight_decay * theta[i] + lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

void adamw_step(StudentParams& params, const ParamGrads& grads, OptimizerState& state, double lr,
                double weight_decay, const AdamWHyper& hyper) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(params.arch == grads.arch) || !(params.arch == state.m.arch)) {
    throw ShapeError("adamw_step: parameter/gradient/state architectures differ");
  }
  grads.for_each_tensor([](std::string_view name, std::span<const double> g, bool) {
    for (double x : g) {
      if (!std::isfinite(x)) throw NumericsError("non-finite gradient in " + std::string(name));
    }
  });

  std::vector<std::span<const double>> g_list;
  std::vector<std::span<double>> m_list, v_list;
  grads.for_each_tensor([&](std::string_view, std::span<const double> g, bool) { g_list.push_back(g); });
  state.m.for_each_tensor([&](std::string_view, std::span<double> m, bool) { m_list.push_back(m); });
  state.v.for_each_tensor([&](std::string_view, std::span<double> v, bool) { v_list.push_back(v); });

  ++state.step;
  std::size_t k = 0;
  params.for_each_tensor([&](std::string_view, std::span<double> theta, bool is_weight) {
    adamw_update(theta, g_list[k], m_list[k], v_list[k], state.step, lr,
                 is_weight ? weight_decay : 0.0, hyper);
    ++k;
  });
}

double lr_at(std::size_t epoch, double base_lr, std::size_t decay_epoch, double decay_rate,
             ScheduleMode mode, std::size_t total_epochs) {
  if (epoch < decay_epoch) return base_lr;
  if (mode == ScheduleMode::step) return base_lr * decay_rate;
  const std::size_t last = total_epochs > 0 ? total_epochs - 1 : epoch;
  if (last <= decay_epoch) return base_lr * decay_rate;
  const double frac =
      std::min(1.0, static_cast<double>(epoch - decay_epoch) / static_cast<double>(last - decay_epoch));
  return base_lr * (1.0 + (decay_rate - 1.0) * frac);
}

// ---------------------------------------------------------------------------
// Student inputs

StudentInputs make_student_inputs(const TeacherBank& bank, std::size_t input_dim, double noise,
                                  std::uint64_t seed) {
  if (input_dim == 0) throw ConfigError("input_dim must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("input noise must be >= 0");
  const std::size_t d = bank.dim();
  SeededRng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  EmbeddingMatrix map_v(d, input_dim), map_t(d, input_dim);
  for (double& x : map_v.values()) x = scale * rng.gaussian();
  for (double& x : map_t.values()) x = scale * rng.gaussian();

  auto corrupt = [&](const EmbeddingMatrix& t) {
    EmbeddingMatrix c = t;
    for (double& x : c.values()) x += noise * rng.gaussian();
    return c;
  };
  EmbeddingMatrix noisy_v = corrupt(bank.image_feats);
  EmbeddingMatrix noisy_t = corrupt(bank.text_feats);
  return StudentInputs{kernels::matmul_nn(noisy_v, map_v), kernels::matmul_nn(noisy_t, map_t)};
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {
constexpr char kCkptMagic[4] = {'D', 'S', 'M', 'C'};
constexpr std::uint8_t kCkptVersion = 1;
}  // namespace

void write_container(const std::string& path, const nlohmann::json& descriptor,
                     std::span<const double> payload) {
  const std::string desc = descriptor.dump();
  io::ByteWriter w;
  w.bytes(kCkptMagic, 4);
  w.u8(kCkptVersion);
  w.u32(static_cast<std::uint32_t>(desc.size()));
  w.bytes(desc.data(), desc.size());
  for (double v : payload) w.f64(v);
  io::write_file_atomic(path, w.buffer());
}

Container read_container(const std::string& path) {
  const auto buf = io::read_file(path);
  io::ByteReader r(buf, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw FormatError(path + ": bad checkpoint magic");
  if (r.u8() != kCkptVersion) throw FormatError(path + ": unsupported checkpoint version");
  const std::uint32_t len = r.u32();
  std::string desc(len, '\0');
  r.bytes(desc.data(), len);
  Container c;
  try {
    c.descriptor = nlohmann::json::parse(desc);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt descriptor: " + e.what());
  }
  if (r.remaining() % 8 != 0) throw FormatError(path + ": payload is not a whole number of f64");
  c.payload.resize(r.remaining() / 8);
  for (double& v : c.payload) v = r.f64();
  return c;
}

void append_params(const StudentParams& params, std::vector<double>& out) {
  params.for_each_tensor([&](std::string_view, std::span<const double> v, bool) {
    out.insert(out.end(), v.begin(), v.end());
  });
}

std::size_t take_params(StudentParams& params, std::span<const double> payload, std::size_t offset) {
  params.for_each_tensor([&](std::string_view name, std::span<double> v, bool) {
    if (offset + v.size() > payload.size()) {
      throw FormatError("checkpoint truncated at tensor " + std::string(name));
    }
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.begin());
    offset += v.size();
  });
  return offset;
}

void save_params(const std::string& path, const StudentParams& params) {
  std::vector<double> payload;
  append_params(params, payload);
  write_container(path, nlohmann::json{{"architecture", params.arch}}, payload);
}

StudentParams load_params(const std::string& path) {
  Container c = read_container(path);
  if (!c.descriptor.contains("architecture")) throw FormatError(path + ": no architecture descriptor");
  const Architecture arch = architecture_from_json(c.descriptor.at("architecture"));
  StudentParams p{arch, zero_tower(arch, arch.image), zero_tower(arch, arch.text)};
  const std::size_t used = take_params(p, c.payload, 0);
  if (!c.descriptor.contains("trainer") && used != c.payload.size()) {
    throw FormatError(path + ": trailing data after parameters");
  }
  p.for_each_tensor([&](std::string_view name, std::span<double> v, bool) {
    for (double x : v) {
      if (!std::isfinite(x)) throw FormatError(path + ": non-finite value in " + std::string(name));
    }
  });
  return p;
}

}  // namespace dsmd
