#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#include "commands.hpp"
#include "stpoi/checkpoint.hpp"
#include "test_support.hpp"

using namespace stpoi;
using stpoi::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = stpoi::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::string prepare_synth(const TempDir& dir, const std::string& name,
                          std::vector<std::string> extra = {}) {
  std::vector<std::string> args = {"prepare", "--synth",   "--users", "20",
                                   "--pois",  "12",        "--seed",  "3",
                                   "--out-dir", (dir / name).string()};
  args.insert(args.end(), extra.begin(), extra.end());
  const Run r = invoke(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return (dir / name / "corpus.bin").string();
}

std::vector<std::string> small_train(const std::string& corpus, const fs::path& out) {
  return {"train",        "--corpus",   corpus, "--out-dir", out.string(), "--epochs", "3",
          "--cell-size",  "8",          "--embed-size", "8", "--lr", "0.01", "--quiet"};
}

}  // namespace

TEST_CASE("prepare is deterministic and writes stats") {
  TempDir dir;
  const auto a = prepare_synth(dir, "a");
  const auto b = prepare_synth(dir, "b");
  CHECK(slurp(a) == slurp(b));
  const json stats = read_json(dir / "a" / "stats.json");
  CHECK(stats["corpus"] == read_json(dir / "b" / "stats.json")["corpus"]);
  CHECK(fs::exists(dir / "a" / "stats.txt"));
}

TEST_CASE("prepare rejects a missing input without writing a corpus") {
  TempDir dir;
  const Run r = invoke({"prepare", "--input", (dir / "nope.tsv").string(), "--out-dir",
                     (dir / "out").string()});
  CHECK(r.code != 0);
  CHECK_FALSE(r.err.empty());
  CHECK_FALSE(fs::exists(dir / "out" / "corpus.bin"));

  CHECK(invoke({"prepare", "--out-dir", (dir / "out").string()}).code == 2);
  CHECK(invoke({"no-such-command"}).code == 2);
}

TEST_CASE("prepare cleans a real check-in file") {
  TempDir dir;
  {
    std::ofstream f(dir / "in.tsv");
    for (int u = 0; u < 4; ++u) {
      for (int k = 0; k < 6; ++k) {
        f << "u" << u << "\t2010-10-" << 10 + k << "T12:00:00Z\t30." << k << "\t-97.0\tp" << k % 3
          << '\n';
      }
    }
    f << "u9\t2010-10-10T12:00:00Z\t30.0\t-97.0\tlonely\n";
    f << "garbage line\n";
  }
  const Run r = invoke({"prepare", "--input", (dir / "in.tsv").string(), "--min-user-checkins", "3",
                     "--min-poi-users", "2", "--out-dir", (dir / "out").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(dir / "out" / "stats.txt").find("malformed_lines\t1\n") != std::string::npos);
  const Corpus c = load_corpus(dir / "out" / "corpus.bin");
  CHECK(c.users.size() == 4);
  CHECK(c.vocab_size() == 3);
}

TEST_CASE("train writes a reproducible run directory") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  REQUIRE(invoke(small_train(corpus, dir / "r1")).code == 0);
  REQUIRE(invoke(small_train(corpus, dir / "r2")).code == 0);
  for (const char* f : {"config.json", "train_log.tsv", "checkpoint.bin", "model.bin"}) {
    CHECK_MESSAGE(fs::exists(dir / "r1" / f), f);
  }
  CHECK(slurp(dir / "r1" / "model.bin") == slurp(dir / "r2" / "model.bin"));
  CHECK(slurp(dir / "r1" / "train_log.tsv") == slurp(dir / "r2" / "train_log.tsv"));

  std::istringstream log(slurp(dir / "r1" / "train_log.tsv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 4);  // header + 3 epochs

  const json cfg = read_json(dir / "r1" / "config.json");
  CHECK(cfg["seed"] == 1);
  CHECK(cfg["model"]["cell_size"] == 8);
  CHECK(cfg["corpus"]["hash"].get<std::string>().size() == 16);
}

TEST_CASE("train records ablation flags in config.json") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  auto args = small_train(corpus, dir / "run");
  args.insert(args.end(), {"--fix-t1", "--fix-t2", "--epochs", "1"});
  REQUIRE(invoke(args).code == 0);
  const json model = read_json(dir / "run" / "config.json")["model"];
  CHECK(model["fix_t1"] == true);
  CHECK(model["fix_t2"] == true);
  CHECK(model["fix_d1"] == false);
  CHECK(model["ablation"] == "distance-only");
  CHECK(load_checkpoint(dir / "run" / "model.bin").config.ablation.fix_t1);
}

TEST_CASE("train resumes from a checkpoint") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  auto full = small_train(corpus, dir / "full");
  REQUIRE(invoke(full).code == 0);
  auto part = small_train(corpus, dir / "part");
  part.insert(part.end(), {"--epochs", "2"});
  REQUIRE(invoke(part).code == 0);
  auto rest = small_train(corpus, dir / "part");
  rest.insert(rest.end(), {"--resume", (dir / "part" / "checkpoint.bin").string()});
  REQUIRE(invoke(rest).code == 0);
  CHECK(load_checkpoint(dir / "part" / "model.bin") == load_checkpoint(dir / "full" / "model.bin"));
}

TEST_CASE("train reports divergence with exit code 3") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  auto args = small_train(corpus, dir / "run");
  args.insert(args.end(), {"--lr", "1e300", "--clip-norm", "0"});
  const Run r = invoke(args);
  CHECK(r.code == 3);
  CHECK(fs::exists(dir / "run" / "diverged_batch.tsv"));
}

TEST_CASE("eval writes metrics for both cohorts") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  REQUIRE(invoke(small_train(corpus, dir / "run")).code == 0);
  const auto model = (dir / "run" / "model.bin").string();
  const Run r = invoke({"eval", "--checkpoint", model, "--corpus", corpus, "--out-dir",
                     (dir / "ev").string(), "--ranks"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json m = read_json(dir / "ev" / "metrics.json");
  REQUIRE(m["records"].size() == 2);
  const json all = m["records"][0]["metrics"];
  CHECK(all["n_instances"].get<std::size_t>() == load_corpus(corpus).test_instances());
  double prev = 0.0;
  for (const char* k : {"acc@1", "acc@5", "acc@10", "acc@15", "acc@20"}) {
    const double v = all[k].get<double>();
    CHECK(v >= prev);
    CHECK(v <= 1.0);
    prev = v;
  }
  CHECK(fs::exists(dir / "ev" / "ranks_all.tsv"));
  CHECK(slurp(dir / "ev" / "metrics.txt") == r.out);

  // Every synthetic user has far more than 5 training check-ins.
  CHECK(m["records"][1]["metrics"].is_null());
  const Run cold = invoke({"eval", "--checkpoint", model, "--corpus", corpus, "--out-dir",
                        (dir / "cold").string(), "--cohort", "cold"});
  CHECK(cold.code == 1);
}

TEST_CASE("eval honours cutoffs and exclude-visited") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  REQUIRE(invoke(small_train(corpus, dir / "run")).code == 0);
  const Run r = invoke({"eval", "--checkpoint", (dir / "run" / "model.bin").string(), "--corpus",
                     corpus, "--out-dir", (dir / "ev").string(), "--cohort", "all", "--topk",
                     "2,3", "--exclude-visited"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json rec = read_json(dir / "ev" / "metrics.json")["records"][0];
  CHECK(rec["exclude_visited"] == true);
  CHECK(rec["metrics"].contains("acc@2"));
  CHECK(rec["metrics"].contains("acc@3"));
  CHECK_FALSE(rec["metrics"].contains("acc@1"));
}

TEST_CASE("eval rejects a checkpoint from another vocabulary") {
  TempDir dir;
  const auto small = prepare_synth(dir, "small");
  const auto big = prepare_synth(dir, "big", {"--pois", "20"});
  REQUIRE(invoke(small_train(small, dir / "run")).code == 0);
  const Run r = invoke({"eval", "--checkpoint", (dir / "run" / "model.bin").string(), "--corpus",
                     big, "--out-dir", (dir / "ev").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("vocab") != std::string::npos);
}

TEST_CASE("grid runs every leg and reproduces its table") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  auto grid = [&](const std::string& out) {
    return invoke({"grid", "--corpus", corpus, "--out-dir", (dir / out).string(), "--variants",
                "lstm,st-lstm,st-clstm", "--cell-sizes", "4,8", "--embed-size", "4", "--epochs",
                "2", "--lr", "0.01"});
  };
  const Run a = grid("g1");
  REQUIRE_MESSAGE(a.code == 0, a.err);
  const std::string tsv = slurp(dir / "g1" / "grid.tsv");
  std::istringstream in(tsv);
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("rank\tvariant\tablation\tcell_size", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(line.find("\tok\t") != std::string::npos);
  }
  CHECK(rows == 6);
  CHECK(read_json(dir / "g1" / "grid.json")["rows"].size() == 6);
  CHECK(fs::exists(dir / "g1" / "legs" / "st-clstm_none_c8_b10_s1" / "model.bin"));

  REQUIRE(grid("g2").code == 0);
  CHECK(slurp(dir / "g2" / "grid.tsv") == tsv);
}

TEST_CASE("grid skips ablations for lstm") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  const Run r = invoke({"grid", "--corpus", corpus, "--out-dir", (dir / "g").string(), "--variants",
                     "lstm,st-clstm", "--ablations", "none,time-only", "--cell-sizes", "4",
                     "--embed-size", "4", "--epochs", "1"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(read_json(dir / "g" / "grid.json")["rows"].size() == 3);
}

TEST_CASE("gradcheck passes for every variant") {
  const Run r = invoke({"gradcheck"});
  CHECK_MESSAGE(r.code == 0, r.out);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("bad flag values are usage errors") {
  TempDir dir;
  const auto corpus = prepare_synth(dir, "data");
  auto args = small_train(corpus, dir / "run");
  args.insert(args.end(), {"--variant", "gru"});
  CHECK(invoke(args).code == 2);
  CHECK(invoke({"prepare", "--synth", "--train-frac", "1.5", "--out-dir", (dir / "x").string()}).code ==
        2);
}
