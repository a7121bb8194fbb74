// dsmd: generate teacher banks, distill students, evaluate retrieval, run
// ablation grids and gradient self-checks.
//
// Exit codes: 0 success, 2 usage/config/file error, 3 numeric failure,
// 4 gradient-check failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dsmd/gradcheck.hpp"
#include "dsmd/pca.hpp"
#include "dsmd/retrieval.hpp"
#include "dsmd/teacher_bank.hpp"
#include "dsmd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerics = 3;
constexpr int kExitGradCheck = 4;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw dsmd::ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw dsmd::ConfigError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw dsmd::FormatError("cannot write " + path.string());
}

dsmd::TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& sets) {
  dsmd::TrainConfig cfg = path.empty() ? dsmd::TrainConfig{} : dsmd::train_config_from_json(read_json_file(path));
  for (const auto& s : sets) cfg = dsmd::apply_override(cfg, s);
  return cfg;
}

json summary_json(const dsmd::Trainer& trainer, double wall_seconds) {
  const auto& rec = trainer.last_record();
  json losses;
  for (std::size_t m = 0; m < dsmd::kTaskCount; ++m) losses[std::string(dsmd::kTaskNames[m])] = rec.losses[m];
  return json{{"epochs_completed", trainer.epoch()},
              {"steps", trainer.step()},
              {"final_losses", losses},
              {"final_lambda", rec.lambdas},
              {"final_w", rec.rates},
              {"final_combined", rec.combined},
              {"wall_time_seconds", wall_seconds},
              {"config", dsmd::to_json(trainer.config())}};
}

// ---------------------------------------------------------------------------

int cmd_gen_teacher(const std::string& config_path, const std::string& out_dir) {
  dsmd::SyntheticTeacherConfig cfg;
  if (!config_path.empty()) cfg = dsmd::synthetic_config_from_json(read_json_file(config_path));
  const dsmd::TeacherBank bank = dsmd::generate_synthetic(cfg);
  dsmd::save_bank(bank, out_dir);
  json provenance{{"generator", "synthetic"}, {"config", cfg}, {"seed", cfg.seed}};
  write_text(fs::path(out_dir) / "provenance.json", provenance.dump(2) + "\n");
  std::cout << "wrote " << bank.image_feats.rows() << " image and " << bank.text_feats.rows()
            << " text features (dim " << bank.dim() << ") to " << out_dir << "\n";
  return kExitOk;
}

int cmd_distill(const std::string& config_path, const std::vector<std::string>& sets,
                const std::string& teacher_dir, const std::string& out_dir,
                const std::string& resume_path, std::optional<std::size_t> stop_after) {
  const dsmd::TrainConfig cfg = load_train_config(config_path, sets);
  const dsmd::TeacherBank bank = dsmd::load_bank(teacher_dir);
  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  const auto inputs = dsmd::student_inputs_for(cfg, bank);

  dsmd::Trainer trainer = resume_path.empty() ? dsmd::Trainer(cfg, bank, inputs)
                                              : dsmd::Trainer::resume(resume_path, cfg, bank, inputs);
  std::ofstream metrics(out / "metrics.jsonl", resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw dsmd::FormatError("cannot write metrics in " + out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const std::string ckpt = (out / "checkpoint.dsmc").string();
  const std::size_t until = stop_after ? *stop_after : cfg.epochs;
  while (!trainer.finished() && trainer.epoch() < until) {
    trainer.run_epoch([&](const dsmd::MetricsRecord& r) { metrics << dsmd::to_json(r).dump() << "\n"; });
    metrics.flush();
    trainer.save_checkpoint(ckpt);
    const auto& r = trainer.last_record();
    std::cout << "epoch " << trainer.epoch() << "/" << cfg.epochs << "  combined " << r.combined
              << "  lr " << r.lr << "\n";
  }
  trainer.save_checkpoint(ckpt);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(out / "summary.json", summary_json(trainer, wall).dump(2) + "\n");
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& teacher_dir, std::string data_dir,
             const std::string& report_path, const std::string& pca_path) {
  if (data_dir.empty()) data_dir = teacher_dir;
  if (data_dir.empty()) throw dsmd::ConfigError("--data is required with --checkpoint");
  const dsmd::TeacherBank data = dsmd::load_bank(data_dir);

  dsmd::EmbeddingMatrix img, txt;
  std::string label;
  if (!checkpoint.empty()) {
    const dsmd::Container c = dsmd::read_container(checkpoint);
    if (!c.descriptor.contains("config")) {
      throw dsmd::FormatError(checkpoint + ": no training config; cannot rebuild student inputs");
    }
    const dsmd::TrainConfig cfg = dsmd::train_config_from_json(c.descriptor.at("config"));
    const dsmd::StudentParams params = dsmd::load_params(checkpoint);
    if (params.arch.teacher_dim != data.dim()) {
      throw dsmd::ConsistencyError("checkpoint teacher dim does not match the data");
    }
    const auto inputs = dsmd::student_inputs_for(cfg, data);
    img = dsmd::encode(params, dsmd::Modality::image, inputs.image);
    txt = dsmd::encode(params, dsmd::Modality::text, inputs.text);
    label = "student";
  } else {
    const dsmd::TeacherBank teacher = teacher_dir == data_dir ? data : dsmd::load_bank(teacher_dir);
    img = teacher.image_feats;
    txt = teacher.text_feats;
    label = "teacher";
  }

  const dsmd::RetrievalReport report = dsmd::evaluate(img, txt, data.pairing);
  const auto table = dsmd::compare_reports({report}, {label});
  write_text(report_path, table.to_csv());
  std::cout << table.to_text();

  if (!pca_path.empty()) {
    dsmd::EmbeddingMatrix joint(img.rows() + txt.rows(), img.dim());
    std::copy(img.values().begin(), img.values().end(), joint.values().begin());
    std::copy(txt.values().begin(), txt.values().end(),
              joint.values().begin() + static_cast<std::ptrdiff_t>(img.size()));
    const dsmd::PcaResult pca = dsmd::pca_project(joint, 3);
    std::ostringstream csv;
    csv << "id,modality,x,y,z\n" << std::setprecision(17);
    for (std::size_t r = 0; r < joint.rows(); ++r) {
      const bool is_img = r < img.rows();
      csv << (is_img ? r : r - img.rows()) << ',' << (is_img ? "image" : "text") << ','
          << pca.coords(r, 0) << ',' << pca.coords(r, 1) << ',' << pca.coords(r, 2) << "\n";
    }
    write_text(pca_path, csv.str());
    if (pca.rank_deficient) std::cerr << "warning: embeddings span fewer than 3 dimensions\n";
  }
  return kExitOk;
}

struct GridCell {
  std::vector<std::pair<std::string, json>> settings;
  dsmd::TrainConfig cfg;
};

std::string value_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::vector<GridCell> expand_grid(const dsmd::TrainConfig& base, const json& grid) {
  if (!grid.is_object()) throw dsmd::ConfigError("grid must be a JSON object of key -> list");
  std::vector<GridCell> cells{GridCell{{}, base}};
  for (const auto& [key, values] : grid.items()) {
    if (!values.is_array() || values.empty()) {
      throw dsmd::ConfigError("grid entry '" + key + "' must be a non-empty list");
    }
    std::vector<GridCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        GridCell c = cell;
        c.cfg = dsmd::apply_override(c.cfg, key + "=" + value_text(v));
        c.settings.emplace_back(key, v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

std::string setting_label(const GridCell& cell, bool skip_seed) {
  std::string label;
  for (const auto& [k, v] : cell.settings) {
    if (skip_seed && k == "seed") continue;
    label += (label.empty() ? "" : ",") + k + "=" + value_text(v);
  }
  return label.empty() ? "baseline" : label;
}

int cmd_ablate(const std::string& config_path, const std::string& grid_path,
               const std::string& teacher_dir, const std::string& out_dir, std::size_t jobs) {
  const dsmd::TrainConfig base = load_train_config(config_path, {});
  const json grid = grid_path.empty() ? json::object() : read_json_file(grid_path);
  const std::vector<GridCell> cells = expand_grid(base, grid);
  const dsmd::TeacherBank bank = teacher_dir.empty() ? dsmd::generate_synthetic({}) : dsmd::load_bank(teacher_dir);
  fs::create_directories(out_dir);

  std::vector<dsmd::RetrievalReport> reports(cells.size());
  std::vector<std::string> errors(cells.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= cells.size()) return;
        i = next++;
      }
      try {
        const auto& cfg = cells[i].cfg;
        const auto inputs = dsmd::student_inputs_for(cfg, bank);
        dsmd::Trainer trainer(cfg, bank, inputs);
        trainer.run();
        const auto img = dsmd::encode(trainer.params(), dsmd::Modality::image, inputs.image);
        const auto txt = dsmd::encode(trainer.params(), dsmd::Modality::text, inputs.text);
        reports[i] = dsmd::evaluate(img, txt, bank.pairing);
        std::ostringstream name;
        name << "cell_" << std::setw(3) << std::setfill('0') << i;
        const fs::path dir = fs::path(out_dir) / name.str();
        fs::create_directories(dir);
        write_text(dir / "config.json", dsmd::to_json(cfg).dump(2) + "\n");
        write_text(dir / "report.csv",
                   dsmd::compare_reports({reports[i]}, {setting_label(cells[i], false)}).to_csv());
        std::lock_guard lock(mu);
        std::cout << name.str() << "  " << setting_label(cells[i], false) << "  RSUM " << reports[i].rsum << "\n";
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, jobs); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) throw dsmd::NumericsError("cell " + std::to_string(i) + ": " + errors[i]);
  }

  // Seeds are replicates: one row per remaining setting, mean over seeds.
  std::vector<std::string> labels;
  std::map<std::string, std::vector<dsmd::RetrievalReport>> groups;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string label = setting_label(cells[i], true);
    if (!groups.count(label)) labels.push_back(label);
    groups[label].push_back(reports[i]);
  }
  std::vector<dsmd::RetrievalReport> means;
  for (const auto& l : labels) means.push_back(dsmd::mean_report(groups[l]));
  const auto table = dsmd::compare_reports(means, labels);
  write_text(fs::path(out_dir) / "comparison.csv", table.to_csv());
  write_text(fs::path(out_dir) / "comparison.txt", table.to_text());
  std::cout << table.to_text();
  return kExitOk;
}

int cmd_grad_check(std::uint64_t seed, std::size_t trials, const std::string& fault) {
  dsmd::GradCheckOptions opts;
  opts.seed = seed;
  opts.trials = trials;
  if (!fault.empty()) opts.corrupt = fault;
  const auto results = dsmd::run_grad_check(opts);
  bool ok = true;
  for (const auto& r : results) {
    std::cout << std::left << std::setw(6) << r.component << " max rel err " << std::scientific
              << std::setprecision(3) << r.max_rel_error << "  (" << r.trials << " trials)  "
              << (r.passed ? "ok" : "FAIL") << "\n";
    ok = ok && r.passed;
  }
  if (!ok) {
    for (const auto& r : results) {
      if (!r.passed) std::cerr << "gradient check failed: " << r.component << "\n";
    }
    return kExitGradCheck;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale feature distillation from a frozen teacher bank"};
  app.require_subcommand(1);

  std::string config, out, teacher, data, report, pca, grid, resume, fault, checkpoint;
  std::vector<std::string> sets;
  std::size_t jobs = 1, trials = 20;
  std::uint64_t seed = 0;
  std::optional<std::size_t> stop_after;

  auto* gen = app.add_subcommand("gen-teacher", "Generate a synthetic teacher bank");
  gen->add_option("--config", config, "Synthetic teacher config (JSON)");
  gen->add_option("--out", out, "Output directory")->required();

  auto* distill = app.add_subcommand("distill", "Distill a student from a teacher bank");
  distill->add_option("--config", config, "Training config (JSON)");
  distill->add_option("--teacher", teacher, "Teacher bank directory")->required();
  distill->add_option("--out", out, "Output directory")->required();
  distill->add_option("--set", sets, "Override a config field: key=value (repeatable)");
  distill->add_option("--resume", resume, "Continue from a trainer checkpoint");
  distill->add_option("--stop-after-epoch", stop_after, "Stop once this many epochs are done");

  auto* eval = app.add_subcommand("eval", "Cross-modal retrieval report");
  auto* ck = eval->add_option("--checkpoint", checkpoint, "Student checkpoint");
  auto* te = eval->add_option("--teacher", teacher, "Evaluate a teacher bank directly");
  ck->excludes(te);
  eval->add_option("--data", data, "Teacher bank supplying inputs and pairing");
  eval->add_option("--report", report, "Report CSV path")->required();
  eval->add_option("--pca", pca, "Also write 3-D PCA coordinates CSV");

  auto* ablate = app.add_subcommand("ablate", "Run a grid of training configurations");
  ablate->add_option("--config", config, "Base training config (JSON)");
  ablate->add_option("--grid", grid, "Grid JSON: {\"key\": [values...]}");
  ablate->add_option("--teacher", teacher, "Teacher bank (default: standard synthetic bank)");
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every analytic gradient");
  gc->add_option("--seed", seed, "RNG seed");
  gc->add_option("--trials", trials, "Random instances per component");
  gc->add_option("--inject-fault", fault, "Corrupt one component's analytic gradient")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_teacher(config, out);
    if (*distill) return cmd_distill(config, sets, teacher, out, resume, stop_after);
    if (*eval) {
      if (checkpoint.empty() && teacher.empty()) {
        std::cerr << "eval: one of --checkpoint or --teacher is required\n";
        return kExitUsage;
      }
      return cmd_eval(checkpoint, teacher, data, report, pca);
    }
    if (*ablate) return cmd_ablate(config, grid, teacher, out, jobs);
    if (*gc) return cmd_grad_check(seed, trials, fault);
  } catch (const dsmd::NumericsError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumerics;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
