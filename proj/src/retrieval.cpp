#include "dsmd/retrieval.hpp"

#include <algorithm>
#include <array>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "dsmd/kernels.hpp"

namespace dsmd {

namespace {

constexpr std::array<std::size_t, 3> kCutoffs{1, 5, 10};

DirectionRecall recall_from_ranks(const std::vector<std::size_t>& ranks) {
  std::array<double, 3> hits{};
  for (std::size_t r : ranks) {
    for (std::size_t c = 0; c < kCutoffs.size(); ++c) {
      if (r < kCutoffs[c]) hits[c] += 1.0;
    }
  }
  const double n = static_cast<double>(ranks.size());
  return {100.0 * hits[0] / n, 100.0 * hits[1] / n, 100.0 * hits[2] / n};
}

double total_rsum(const RetrievalReport& r) {
  return r.image_to_text.r1 + r.image_to_text.r5 + r.image_to_text.r10 + r.text_to_image.r1 +
         r.text_to_image.r5 + r.text_to_image.r10;
}

}  // namespace

RetrievalReport evaluate(const EmbeddingMatrix& img_emb, const EmbeddingMatrix& txt_emb,
                         const std::vector<std::size_t>& pairing) {
  if (img_emb.dim() != txt_emb.dim()) throw ShapeError("evaluate: embedding dims differ");
  if (pairing.size() != txt_emb.rows()) {
    throw ConsistencyError("evaluate: pairing has " + std::to_string(pairing.size()) +
                           " entries for " + std::to_string(txt_emb.rows()) + " captions");
  }
  if (img_emb.rows() == 0) throw ConsistencyError("evaluate: no images");
  std::vector<std::vector<std::size_t>> captions(img_emb.rows());
  std::vector<std::vector<std::size_t>> owner(txt_emb.rows());
  for (std::size_t t = 0; t < pairing.size(); ++t) {
    if (pairing[t] >= img_emb.rows()) throw ConsistencyError("evaluate: pairing references missing image");
    captions[pairing[t]].push_back(t);
    owner[t] = {pairing[t]};
  }

  RetrievalReport report;
  report.image_to_text =
      recall_from_ranks(kernels::best_gt_rank(kernels::cosine_matrix(img_emb, txt_emb), captions));
  report.text_to_image =
      recall_from_ranks(kernels::best_gt_rank(kernels::cosine_matrix(txt_emb, img_emb), owner));
  report.rsum = total_rsum(report);
  return report;
}

RetrievalReport mean_report(const std::vector<RetrievalReport>& reports) {
  RetrievalReport m;
  if (reports.empty()) return m;
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    m.image_to_text.r1 += r.image_to_text.r1 / n;
    m.image_to_text.r5 += r.image_to_text.r5 / n;
    m.image_to_text.r10 += r.image_to_text.r10 / n;
    m.text_to_image.r1 += r.text_to_image.r1 / n;
    m.text_to_image.r5 += r.text_to_image.r5 / n;
    m.text_to_image.r10 += r.text_to_image.r10 / n;
  }
  m.rsum = total_rsum(m);
  return m;
}

double chance_rsum(std::size_t n_images, std::size_t n_texts, std::size_t captions_per_image) {
  double total = 0.0;
  for (std::size_t k : kCutoffs) {
    total += 100.0 * std::min(1.0, static_cast<double>(k) / static_cast<double>(n_images));
    double miss = 1.0;
    for (std::size_t i = 0; i < k && i < n_texts; ++i) {
      const double num = static_cast<double>(n_texts) - static_cast<double>(captions_per_image) -
                         static_cast<double>(i);
      miss *= std::max(0.0, num) / static_cast<double>(n_texts - i);
    }
    total += 100.0 * (1.0 - miss);
  }
  return total;
}

ReportTable compare_reports(const std::vector<RetrievalReport>& reports,
                            const std::vector<std::string>& labels, bool sort_by_rsum) {
  if (reports.size() != labels.size()) throw ShapeError("compare_reports: one label per report");
  std::vector<std::size_t> order(reports.size());
  std::iota(order.begin(), order.end(), 0);
  if (sort_by_rsum) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return reports[a].rsum > reports[b].rsum; });
  }
  ReportTable table;
  for (std::size_t i : order) {
    table.labels.push_back(labels[i]);
    table.reports.push_back(reports[i]);
  }
  return table;
}

std::string ReportTable::to_text() const {
  std::size_t width = 5;
  for (const auto& l : labels) width = std::max(width, l.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "label" << std::right;
  for (const char* h : {"i2t R@1", "i2t R@5", "i2t R@10", "t2i R@1", "t2i R@5", "t2i R@10", "RSUM"}) {
    out << std::setw(10) << h;
  }
  out << "\n" << std::fixed << std::setprecision(1);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    out << std::left << std::setw(static_cast<int>(width)) << labels[i] << std::right;
    for (double v : {r.image_to_text.r1, r.image_to_text.r5, r.image_to_text.r10, r.text_to_image.r1,
                     r.text_to_image.r5, r.text_to_image.r10, r.rsum}) {
      out << std::setw(10) << v;
    }
    out << "\n";
  }
  return out.str();
}

std::string ReportTable::to_csv() const {
  std::ostringstream out;
  out << "label,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,rsum\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    out << labels[i] << ',' << r.image_to_text.r1 << ',' << r.image_to_text.r5 << ','
        << r.image_to_text.r10 << ',' << r.text_to_image.r1 << ',' << r.text_to_image.r5 << ','
        << r.text_to_image.r10 << ',' << r.rsum << "\n";
  }
  return out.str();
}

}  // namespace dsmd
