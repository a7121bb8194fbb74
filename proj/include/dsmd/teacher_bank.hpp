#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmd/matrix.hpp"

namespace dsmd {

enum class Modality : std::uint8_t { image = 0, text = 1 };

/// Frozen teacher knowledge: unit-norm image and caption features plus the
/// caption -> image ownership map.
struct TeacherBank {
  EmbeddingMatrix image_feats;
  EmbeddingMatrix text_feats;
  std::vector<std::size_t> pairing;  // pairing[text_row] = image_row

  std::size_t dim() const { return image_feats.dim(); }
  /// Caption rows owned by each image, in ascending order.
  std::vector<std::vector<std::size_t>> captions_by_image() const;
  /// k if every image owns captions k*i .. k*i+k-1, otherwise nullopt.
  std::optional<std::size_t> uniform_captions_per_image() const;

  /// Throws ShapeError/ConsistencyError if the bank invariants do not hold.
  void validate(double norm_tolerance = 1e-6) const;
};

struct SyntheticTeacherConfig {
  std::size_t n_images = 500;
  std::size_t captions_per_image = 5;
  std::size_t dim = 32;
  std::size_t n_clusters = 20;
  double intra_cluster_spread = 0.15;
  double cross_modal_noise = 0.2;
  std::uint64_t seed = 7;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticTeacherConfig& c);
/// Strict: unknown keys and wrong types raise ConfigError.
SyntheticTeacherConfig synthetic_config_from_json(const nlohmann::json& j);

/// Desk-scale stand-in for a real teacher.
///
/// Image i belongs to cluster i mod n_clusters. Draw order from one
/// SeededRng(seed): all cluster-center coordinates, then every image's noise
/// (row order), then every caption's noise (row order). Captions are assigned
/// in consecutive blocks of captions_per_image.
TeacherBank generate_synthetic(const SyntheticTeacherConfig& cfg);

/// L2-normalizes raw features. Without `pairing` the row counts must match and
/// the identity pairing is used.
TeacherBank normalize_teacher(const EmbeddingMatrix& raw_img, const EmbeddingMatrix& raw_txt,
                              std::optional<std::vector<std::size_t>> pairing = std::nullopt);

// DSMD feature file: "DSMD", u8 version=1, u8 modality, u16 reserved=0,
// u32 rows, u32 dim, then rows*dim little-endian f32.
void write_features(const std::string& path, const EmbeddingMatrix& m, Modality modality);
EmbeddingMatrix read_features(const std::string& path, Modality expected);

nlohmann::json manifest_json(const TeacherBank& bank);
std::vector<std::size_t> pairing_from_manifest(const nlohmann::json& manifest,
                                               std::size_t image_rows, std::size_t text_rows);

inline constexpr const char* kImageFile = "image.dsmd";
inline constexpr const char* kTextFile = "text.dsmd";
inline constexpr const char* kManifestFile = "manifest.json";

/// Writes image.dsmd, text.dsmd and manifest.json into `dir` (created if needed).
void save_bank(const TeacherBank& bank, const std::string& dir);
/// Reads a bank written by save_bank; rows are re-normalized after checking
/// they are unit-norm within 1e-5.
TeacherBank load_bank(const std::string& dir);

}  // namespace dsmd
