#pragma once

#include <string>
#include <vector>

#include "dsmd/matrix.hpp"

namespace dsmd {

struct DirectionRecall {
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  double rsum() const { return r1 + r5 + r10; }
};

/// Recall@{1,5,10} in percent for both retrieval directions.
struct RetrievalReport {
  DirectionRecall image_to_text;
  DirectionRecall text_to_image;
  double rsum = 0.0;  // sum of the six recalls
};

/// Cosine-similarity retrieval. Image query hits at K when any of its captions
/// is in the top K texts; a caption query hits when its image is in the top K.
/// Ties rank the lower row index first. `pairing[text_row] = image_row`.
RetrievalReport evaluate(const EmbeddingMatrix& img_emb, const EmbeddingMatrix& txt_emb,
                         const std::vector<std::size_t>& pairing);

/// Element-wise mean of several reports (rsum recomputed from the means).
RetrievalReport mean_report(const std::vector<RetrievalReport>& reports);

/// RSUM of random ranking: t2i R@K = K/N_img, i2t R@K = 1 - C(N_txt - c, K)/C(N_txt, K)
/// with c captions per image.
double chance_rsum(std::size_t n_images, std::size_t n_texts, std::size_t captions_per_image);

struct ReportTable {
  std::vector<std::string> labels;
  std::vector<RetrievalReport> reports;

  std::string to_text() const;
  std::string to_csv() const;
};

/// One row per report; with `sort_by_rsum` rows are ordered by RSUM descending
/// (stable for equal RSUM).
ReportTable compare_reports(const std::vector<RetrievalReport>& reports,
                            const std::vector<std::string>& labels, bool sort_by_rsum = false);

}  // namespace dsmd
