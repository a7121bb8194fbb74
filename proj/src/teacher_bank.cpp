#include "dsmd/teacher_bank.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "binary_io.hpp"
#include "dsmd/embedding.hpp"
#include "dsmd/kernels.hpp"
#include "dsmd/rng.hpp"
#include "json_util.hpp"

namespace dsmd {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'M', 'D'};
constexpr std::uint8_t kVersion = 1;

void check_unit_rows(const EmbeddingMatrix& m, double tol, const char* what) {
  const auto norms = kernels::row_norms(m);
  for (std::size_t r = 0; r < norms.size(); ++r) {
    if (!(std::abs(norms[r] - 1.0) <= tol)) {
      throw ConsistencyError(std::string(what) + " row " + std::to_string(r) +
                             " is not unit-norm (|x|=" + std::to_string(norms[r]) + ")");
    }
  }
}

}  // namespace

std::vector<std::vector<std::size_t>> TeacherBank::captions_by_image() const {
  std::vector<std::vector<std::size_t>> out(image_feats.rows());
  for (std::size_t t = 0; t < pairing.size(); ++t) out.at(pairing[t]).push_back(t);
  return out;
}

std::optional<std::size_t> TeacherBank::uniform_captions_per_image() const {
  const std::size_t n = image_feats.rows();
  if (n == 0 || pairing.size() % n != 0) return std::nullopt;
  const std::size_t k = pairing.size() / n;
  for (std::size_t t = 0; t < pairing.size(); ++t) {
    if (pairing[t] != t / k) return std::nullopt;
  }
  return k;
}

void TeacherBank::validate(double norm_tolerance) const {
  if (image_feats.dim() != text_feats.dim()) throw ShapeError("teacher bank: modality dims differ");
  if (pairing.size() != text_feats.rows()) {
    throw ConsistencyError("teacher bank: pairing lists " + std::to_string(pairing.size()) +
                           " captions but text matrix has " + std::to_string(text_feats.rows()) +
                           " rows");
  }
  for (std::size_t img : pairing) {
    if (img >= image_feats.rows()) throw ConsistencyError("teacher bank: pairing references missing image");
  }
  image_feats.require_finite("teacher image features");
  text_feats.require_finite("teacher text features");
  check_unit_rows(image_feats, norm_tolerance, "teacher image");
  check_unit_rows(text_feats, norm_tolerance, "teacher text");
}

void SyntheticTeacherConfig::validate() const {
  if (n_images == 0) throw ConfigError("n_images must be >= 1");
  if (captions_per_image == 0) throw ConfigError("captions_per_image must be >= 1");
  if (dim < 2) throw ConfigError("dim must be >= 2");
  if (n_clusters == 0 || n_clusters > n_images) throw ConfigError("n_clusters must be in [1, n_images]");
  if (!(intra_cluster_spread >= 0.0) || !std::isfinite(intra_cluster_spread))
    throw ConfigError("intra_cluster_spread must be finite and >= 0");
  if (!(cross_modal_noise >= 0.0) || !std::isfinite(cross_modal_noise))
    throw ConfigError("cross_modal_noise must be finite and >= 0");
}

void to_json(nlohmann::json& j, const SyntheticTeacherConfig& c) {
  j = nlohmann::json{{"n_images", c.n_images},
                     {"captions_per_image", c.captions_per_image},
                     {"dim", c.dim},
                     {"n_clusters", c.n_clusters},
                     {"intra_cluster_spread", c.intra_cluster_spread},
                     {"cross_modal_noise", c.cross_modal_noise},
                     {"seed", c.seed}};
}

SyntheticTeacherConfig synthetic_config_from_json(const nlohmann::json& j) {
  jsonutil::require_object(j, "teacher config");
  jsonutil::reject_unknown(j,
                           {"n_images", "captions_per_image", "dim", "n_clusters",
                            "intra_cluster_spread", "cross_modal_noise", "seed"},
                           "teacher config");
  SyntheticTeacherConfig c;
  jsonutil::read(j, "n_images", c.n_images);
  jsonutil::read(j, "captions_per_image", c.captions_per_image);
  jsonutil::read(j, "dim", c.dim);
  jsonutil::read(j, "n_clusters", c.n_clusters);
  jsonutil::read(j, "intra_cluster_spread", c.intra_cluster_spread);
  jsonutil::read(j, "cross_modal_noise", c.cross_modal_noise);
  jsonutil::read(j, "seed", c.seed);
  c.validate();
  return c;
}

TeacherBank generate_synthetic(const SyntheticTeacherConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  const std::size_t d = cfg.dim;

  EmbeddingMatrix centers(cfg.n_clusters, d);
  for (double& v : centers.values()) v = rng.gaussian();
  centers = l2_normalize(centers);

  EmbeddingMatrix images(cfg.n_images, d);
  for (std::size_t i = 0; i < cfg.n_images; ++i) {
    auto center = centers.row(i % cfg.n_clusters);
    auto row = images.row(i);
    for (std::size_t k = 0; k < d; ++k) row[k] = center[k] + cfg.intra_cluster_spread * rng.gaussian();
  }
  images = l2_normalize(images);

  const std::size_t n_text = cfg.n_images * cfg.captions_per_image;
  EmbeddingMatrix texts(n_text, d);
  std::vector<std::size_t> pairing(n_text);
  for (std::size_t t = 0; t < n_text; ++t) {
    pairing[t] = t / cfg.captions_per_image;
    auto img = images.row(pairing[t]);
    auto row = texts.row(t);
    for (std::size_t k = 0; k < d; ++k) row[k] = img[k] + cfg.cross_modal_noise * rng.gaussian();
  }
  texts = l2_normalize(texts);

  return TeacherBank{std::move(images), std::move(texts), std::move(pairing)};
}

TeacherBank normalize_teacher(const EmbeddingMatrix& raw_img, const EmbeddingMatrix& raw_txt,
                              std::optional<std::vector<std::size_t>> pairing) {
  if (raw_img.dim() != raw_txt.dim()) throw ShapeError("normalize_teacher: modality dims differ");
  std::vector<std::size_t> pairs;
  if (pairing) {
    pairs = std::move(*pairing);
  } else {
    if (raw_img.rows() != raw_txt.rows()) {
      throw ConsistencyError("normalize_teacher: identity pairing needs equal row counts");
    }
    pairs.resize(raw_txt.rows());
    for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = i;
  }
  TeacherBank bank{l2_normalize(raw_img), l2_normalize(raw_txt), std::move(pairs)};
  bank.validate();
  return bank;
}

void write_features(const std::string& path, const EmbeddingMatrix& m, Modality modality) {
  m.require_finite("feature matrix");
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(modality));
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.dim()));
  for (double v : m.values()) w.f32(static_cast<float>(v));
  io::write_file_atomic(path, w.buffer());
}

EmbeddingMatrix read_features(const std::string& path, Modality expected) {
  const auto buf = io::read_file(path);
  io::ByteReader r(buf, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": bad magic");
  if (r.u8() != kVersion) throw FormatError(path + ": unsupported version");
  const std::uint8_t tag = r.u8();
  if (tag > 1) throw FormatError(path + ": unknown modality tag");
  if (tag != static_cast<std::uint8_t>(expected)) throw FormatError(path + ": wrong modality tag");
  if (r.u16() != 0) throw FormatError(path + ": reserved field is not zero");
  const std::size_t rows = r.u32();
  const std::size_t dim = r.u32();
  if (r.remaining() != rows * dim * 4) throw FormatError(path + ": payload size mismatch");
  EmbeddingMatrix m(rows, dim);
  for (double& v : m.values()) {
    const float f = r.f32();
    if (!std::isfinite(f)) throw FormatError(path + ": non-finite value");
    v = f;
  }
  return m;
}

nlohmann::json manifest_json(const TeacherBank& bank) {
  if (auto k = bank.uniform_captions_per_image()) return {{"captions_per_image", *k}};
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t t = 0; t < bank.pairing.size(); ++t) pairs.push_back({t, bank.pairing[t]});
  return {{"pairs", pairs}};
}

namespace {
bool is_index(const nlohmann::json& v) { return v.is_number_integer() && v.get<std::int64_t>() >= 0; }
}  // namespace

std::vector<std::size_t> pairing_from_manifest(const nlohmann::json& manifest,
                                               std::size_t image_rows, std::size_t text_rows) {
  if (!manifest.is_object()) throw FormatError("manifest: expected a JSON object");
  std::vector<std::size_t> pairing;
  if (manifest.contains("captions_per_image")) {
    const auto& kv = manifest.at("captions_per_image");
    if (!is_index(kv) || kv.get<std::size_t>() == 0)
      throw FormatError("manifest: captions_per_image must be a positive integer");
    const std::size_t k = kv.get<std::size_t>();
    if (image_rows * k != text_rows) {
      throw ConsistencyError("manifest lists " + std::to_string(image_rows * k) +
                             " captions but text matrix has " + std::to_string(text_rows) + " rows");
    }
    pairing.resize(text_rows);
    for (std::size_t t = 0; t < text_rows; ++t) pairing[t] = t / k;
    return pairing;
  }
  if (!manifest.contains("pairs") || !manifest.at("pairs").is_array())
    throw FormatError("manifest: needs captions_per_image or pairs");
  const auto& pairs = manifest.at("pairs");
  if (pairs.size() != text_rows) {
    throw ConsistencyError("manifest lists " + std::to_string(pairs.size()) +
                           " captions but text matrix has " + std::to_string(text_rows) + " rows");
  }
  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  pairing.assign(text_rows, kUnset);
  for (const auto& p : pairs) {
    if (!p.is_array() || p.size() != 2 || !is_index(p[0]) || !is_index(p[1]))
      throw FormatError("manifest: each pair must be [text_row, image_row]");
    const auto t = p[0].get<std::size_t>();
    const auto i = p[1].get<std::size_t>();
    if (t >= text_rows || i >= image_rows) throw ConsistencyError("manifest: row index out of range");
    if (pairing[t] != kUnset) throw ConsistencyError("manifest: text row listed twice");
    pairing[t] = i;
  }
  return pairing;
}

void save_bank(const TeacherBank& bank, const std::string& dir) {
  bank.validate();
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  write_features((base / kImageFile).string(), bank.image_feats, Modality::image);
  write_features((base / kTextFile).string(), bank.text_feats, Modality::text);
  std::ofstream out(base / kManifestFile);
  out << manifest_json(bank).dump() << "\n";
  if (!out) throw FormatError("cannot write manifest in " + dir);
}

TeacherBank load_bank(const std::string& dir) {
  const std::filesystem::path base(dir);
  auto img = read_features((base / kImageFile).string(), Modality::image);
  auto txt = read_features((base / kTextFile).string(), Modality::text);
  if (img.dim() != txt.dim()) throw ConsistencyError("teacher files have different dims");
  std::ifstream in(base / kManifestFile);
  if (!in) throw FormatError("cannot open manifest in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  auto pairing = pairing_from_manifest(manifest, img.rows(), txt.rows());
  check_unit_rows(img, 1e-5, "teacher image");
  check_unit_rows(txt, 1e-5, "teacher text");
  TeacherBank bank{l2_normalize(img), l2_normalize(txt), std::move(pairing)};
  bank.validate();
  return bank;
}

}  // namespace dsmd
