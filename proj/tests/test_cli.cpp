#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <doctest.h>
#include <nlohmann/json.hpp>

#include "dsmd/teacher_bank.hpp"
#include "test_util.hpp"

#ifndef DSMD_CLI_PATH
#error "DSMD_CLI_PATH must point at the dsmd executable"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args, const testutil::TempDir& dir) {
  const std::string cmd = std::string(DSMD_CLI_PATH) + " " + args + " > " + dir.file("stdout.txt") + " 2> " +
                          dir.file("stderr.txt");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_json(const std::string& path, const json& j) { std::ofstream(path) << j.dump(); }

std::vector<std::string> csv_rows(const std::string& path) {
  std::vector<std::string> rows;
  std::istringstream in(testutil::read_text(path));
  for (std::string line; std::getline(in, line);) rows.push_back(line);
  return rows;
}

double csv_rsum(const std::string& path) {
  const auto rows = csv_rows(path);
  REQUIRE(rows.size() >= 2);
  return std::stod(rows[1].substr(rows[1].rfind(',') + 1));
}

json small_teacher() {
  return json{{"n_images", 64}, {"captions_per_image", 2}, {"dim", 8}, {"n_clusters", 4}};
}

json small_train() {
  return json{{"epochs", 3}, {"batch_size", 16}, {"base_lr", 1e-3}, {"decay_epoch", 2},
              {"input_dim", 10}, {"hidden_dims", {8}}, {"queue_size", 40}};
}

struct Fixture {
  Fixture() {
    write_json(dir.file("teacher.json"), small_teacher());
    write_json(dir.file("train.json"), small_train());
    REQUIRE(run("gen-teacher --config " + dir.file("teacher.json") + " --out " + dir.file("bank"), dir) == 0);
  }
  testutil::TempDir dir;
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("gen-teacher writes a loadable bank deterministically") {
  Fixture f;
  for (const char* name : {"image.dsmd", "text.dsmd", "manifest.json", "provenance.json"}) {
    CHECK(fs::exists(f.dir.path / "bank" / name));
  }
  CHECK(dsmd::load_bank(f.dir.file("bank")).text_feats.rows() == 128);
  const auto prov = json::parse(testutil::read_text(f.dir.file("bank/provenance.json")));
  CHECK(prov.at("seed") == 7);
  CHECK(prov.at("config").at("n_images") == 64);

  REQUIRE(run("gen-teacher --config " + f.dir.file("teacher.json") + " --out " + f.dir.file("bank2"), f.dir) == 0);
  for (const char* name : {"image.dsmd", "text.dsmd"}) {
    CHECK(testutil::read_bytes(f.dir.file(std::string("bank/") + name)) ==
          testutil::read_bytes(f.dir.file(std::string("bank2/") + name)));
  }
}

TEST_CASE("usage and config errors exit 2") {
  testutil::TempDir dir;
  CHECK(run("gen-teacher", dir) == 2);
  CHECK(run("", dir) == 2);
  CHECK(run("frobnicate", dir) == 2);
  CHECK(run("--help", dir) == 0);
  write_json(dir.file("bad.json"), json{{"n_images", 10}, {"n_clusters", 20}});
  CHECK(run("gen-teacher --config " + dir.file("bad.json") + " --out " + dir.file("x"), dir) == 2);
  write_json(dir.file("unknown.json"), json{{"colour", 1}});
  CHECK(run("gen-teacher --config " + dir.file("unknown.json") + " --out " + dir.file("x"), dir) == 2);
  CHECK(run("distill --teacher " + dir.file("missing") + " --out " + dir.file("o"), dir) == 2);
  CHECK(run("eval --report " + dir.file("r.csv"), dir) == 2);
}

TEST_CASE("distill writes checkpoint, metrics and summary") {
  Fixture f;
  const auto& d = f.dir;
  REQUIRE(run("distill --config " + d.file("train.json") + " --teacher " + d.file("bank") + " --out " + d.file("run"), d) == 0);
  CHECK(fs::exists(d.path / "run" / "checkpoint.dsmc"));
  CHECK_FALSE(fs::exists(d.path / "run" / "checkpoint.dsmc.tmp"));
  const auto lines = csv_rows(d.file("run/metrics.jsonl"));
  CHECK(lines.size() == 3 * (64 / 16));
  const auto first = json::parse(lines.front());
  for (const char* key : {"step", "epoch", "losses", "scaled", "w", "lambda", "combined", "lr", "queue_fill"}) {
    CHECK(first.contains(key));
  }
  const auto summary = json::parse(testutil::read_text(d.file("run/summary.json")));
  double sum = 0;
  for (double l : summary.at("final_lambda")) sum += l;
  CHECK(summary.at("final_lambda").size() == 4);
  CHECK(std::abs(sum - 4.0) < 1e-9);
  CHECK(summary.contains("wall_time_seconds"));
  CHECK(summary.at("final_losses").contains("HND"));
}

TEST_CASE("--set balancer=off logs unit weights") {
  Fixture f;
  const auto& d = f.dir;
  REQUIRE(run("distill --config " + d.file("train.json") + " --set balancer=off --teacher " + d.file("bank") +
                  " --out " + d.file("run"),
              d) == 0);
  for (const auto& line : csv_rows(d.file("run/metrics.jsonl"))) {
    for (double l : json::parse(line).at("lambda")) CHECK(l == 1.0);
  }
  CHECK(run("distill --set nonsense=1 --teacher " + d.file("bank") + " --out " + d.file("run2"), d) == 2);
  CHECK(run("distill --set tau=hot --teacher " + d.file("bank") + " --out " + d.file("run2"), d) == 2);
}

TEST_CASE("resume after an interrupt equals the uninterrupted run") {
  Fixture f;
  const auto& d = f.dir;
  const std::string common = "distill --config " + d.file("train.json") + " --teacher " + d.file("bank");
  REQUIRE(run(common + " --out " + d.file("straight"), d) == 0);
  REQUIRE(run(common + " --out " + d.file("split") + " --stop-after-epoch 1", d) == 0);
  REQUIRE(run(common + " --out " + d.file("split") + " --resume " + d.file("split/checkpoint.dsmc"), d) == 0);
  CHECK(testutil::read_bytes(d.file("split/checkpoint.dsmc")) == testutil::read_bytes(d.file("straight/checkpoint.dsmc")));
  CHECK(testutil::read_text(d.file("split/metrics.jsonl")) == testutil::read_text(d.file("straight/metrics.jsonl")));
}

TEST_CASE("numeric failure exits 3") {
  Fixture f;
  const auto& d = f.dir;
  CHECK(run("distill --config " + d.file("train.json") + " --set input_noise=1e308 --teacher " + d.file("bank") +
                " --out " + d.file("run"),
            d) == 3);
}

TEST_CASE("eval of a noiseless teacher is perfect") {
  testutil::TempDir d;
  write_json(d.file("t.json"), json{{"n_images", 30}, {"cross_modal_noise", 0.0}, {"n_clusters", 5}});
  REQUIRE(run("gen-teacher --config " + d.file("t.json") + " --out " + d.file("bank"), d) == 0);
  REQUIRE(run("eval --teacher " + d.file("bank") + " --report " + d.file("r.csv"), d) == 0);
  CHECK(csv_rsum(d.file("r.csv")) == 600.0);
}

TEST_CASE("eval of an untrained student sits between chance and the teacher") {
  Fixture f;
  const auto& d = f.dir;
  REQUIRE(run("distill --config " + d.file("train.json") + " --teacher " + d.file("bank") + " --out " + d.file("run") +
                  " --stop-after-epoch 0",
              d) == 0);
  REQUIRE(run("eval --checkpoint " + d.file("run/checkpoint.dsmc") + " --data " + d.file("bank") + " --report " +
                  d.file("s.csv") + " --pca " + d.file("pca.csv"),
              d) == 0);
  REQUIRE(run("eval --teacher " + d.file("bank") + " --report " + d.file("t.csv"), d) == 0);
  const double student = csv_rsum(d.file("s.csv"));
  const double teacher = csv_rsum(d.file("t.csv"));
  CHECK(student < teacher);
  CHECK(student > 0.0);

  const auto pca = csv_rows(d.file("pca.csv"));
  CHECK(pca.size() == 1 + 64 + 128);
  CHECK(pca[0] == "id,modality,x,y,z");
  CHECK(pca[1].rfind("0,image,", 0) == 0);
  CHECK(pca[65].rfind("0,text,", 0) == 0);

  CHECK(run("eval --checkpoint " + d.file("run/checkpoint.dsmc") + " --teacher " + d.file("bank") + " --report " +
                d.file("x.csv"),
            d) == 2);
  CHECK(run("eval --checkpoint " + d.file("run/checkpoint.dsmc") + " --report " + d.file("x.csv"), d) == 2);
}

TEST_CASE("ablate runs every grid cell") {
  Fixture f;
  const auto& d = f.dir;
  write_json(d.file("grid.json"), json{{"balancer", {"on", "off"}}, {"seed", {0, 1, 2}}});
  REQUIRE(run("ablate --config " + d.file("train.json") + " --grid " + d.file("grid.json") + " --teacher " +
                  d.file("bank") + " --out " + d.file("abl") + " --jobs 2",
              d) == 0);
  std::size_t cells = 0;
  for (const auto& e : fs::directory_iterator(d.path / "abl")) {
    if (e.is_directory()) {
      ++cells;
      CHECK(fs::exists(e.path() / "report.csv"));
    }
  }
  CHECK(cells == 6);
  const auto table = csv_rows(d.file("abl/comparison.csv"));
  REQUIRE(table.size() == 3);
  CHECK(table[1].rfind("balancer=on,", 0) == 0);
  CHECK(table[2].rfind("balancer=off,", 0) == 0);

  // One worker gives the same table.
  REQUIRE(run("ablate --config " + d.file("train.json") + " --grid " + d.file("grid.json") + " --teacher " +
                  d.file("bank") + " --out " + d.file("abl1") + " --jobs 1",
              d) == 0);
  CHECK(testutil::read_text(d.file("abl1/comparison.csv")) == testutil::read_text(d.file("abl/comparison.csv")));
}

TEST_CASE("ablate edge cases") {
  Fixture f;
  const auto& d = f.dir;
  write_json(d.file("empty.json"), json::object());
  REQUIRE(run("ablate --config " + d.file("train.json") + " --grid " + d.file("empty.json") + " --teacher " +
                  d.file("bank") + " --out " + d.file("abl"),
              d) == 0);
  const auto table = csv_rows(d.file("abl/comparison.csv"));
  REQUIRE(table.size() == 2);
  CHECK(table[1].rfind("baseline,", 0) == 0);

  write_json(d.file("tau.json"), json{{"tau", {0.05, 0.2, 0.5, 1}}});
  REQUIRE(run("ablate --config " + d.file("train.json") + " --grid " + d.file("tau.json") + " --teacher " +
                  d.file("bank") + " --out " + d.file("tau"),
              d) == 0);
  CHECK(csv_rows(d.file("tau/comparison.csv")).size() == 5);

  write_json(d.file("bad.json"), json{{"learning_rate", {1, 2}}});
  CHECK(run("ablate --config " + d.file("train.json") + " --grid " + d.file("bad.json") + " --teacher " +
                d.file("bank") + " --out " + d.file("bad"),
            d) == 2);
}

TEST_CASE("grad-check exit codes") {
  testutil::TempDir d;
  CHECK(run("grad-check --seed 3 --trials 5", d) == 0);
  CHECK(run("grad-check --trials 0", d) == 0);
  CHECK(run("grad-check --seed 1 --trials 3 --inject-fault SD", d) == 4);
  CHECK(testutil::read_text(d.file("stderr.txt")).find("SD") != std::string::npos);
}

}  // TEST_SUITE
