#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "test_support.hpp"
#include "tsca/data.hpp"
#include "tsca/model.hpp"
#include "tsca/transport.hpp"

namespace tsca {
namespace {

namespace fs = std::filesystem;
using testing::read_file;
using testing::TempDir;
using testing::write_file;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

const std::vector<std::string> kDataFiles = {"states.txt",     "objects.txt",    "pairs_train.txt",
                                             "pairs_val.txt",  "pairs_test.txt", "samples.jsonl",
                                             "features.bin"};

// Small dataset and a briefly trained checkpoint shared by the read-only tests.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    ASSERT_EQ(cli({"-q", "generate", "-o", data().string(), "--seed", "3"}).code, 0);
    ASSERT_EQ(cli({"-q", "train", "-d", data().string(), "-o", (dir_->path() / "m").string(),
                   "--epochs", "4"})
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path data() { return dir_->path() / "data"; }
  static fs::path model() { return dir_->path() / "m" / "model.ckpt"; }

  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

std::vector<std::vector<double>> read_trace(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,base,ct,cyc,de,total");
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

std::string config_value(const fs::path& run_dir, const std::string& key) {
  std::ifstream is(run_dir / "config.txt");
  for (std::string line; std::getline(is, line);) {
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  }
  return "<missing>";
}

TEST_F(CliTest, GenerateWritesEveryDataFile) {
  for (const auto& f : kDataFiles) EXPECT_TRUE(fs::exists(data() / f)) << f;
}

TEST_F(CliTest, GenerateIsByteIdenticalForTheSameSeed) {
  TempDir t("gen");
  ASSERT_EQ(cli({"-q", "generate", "-o", (t / "a").string(), "--seed", "3"}).code, 0);
  for (const auto& f : kDataFiles) {
    EXPECT_EQ(read_file(t / "a" / f), read_file(data() / f)) << f;
  }
  ASSERT_EQ(cli({"-q", "generate", "-o", (t / "a").string(), "--seed", "3", "--force"}).code, 0);
  EXPECT_EQ(read_file(t / "a" / "features.bin"), read_file(data() / "features.bin"));
}

TEST_F(CliTest, GenerateRefusesNonEmptyDirectoryWithoutForce) {
  TempDir t("gen");
  write_file(t / "keep.txt", "x");
  const Outcome r = cli({"generate", "-o", t.path().string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--force"), std::string::npos);
  EXPECT_EQ(read_file(t / "keep.txt"), "x");
}

TEST_F(CliTest, GenerateRejectsBadSeenFraction) {
  TempDir t("gen");
  const Outcome r = cli({"generate", "-o", (t / "d").string(), "--seen-fraction", "1.5"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("seen fraction"), std::string::npos);
  EXPECT_FALSE(fs::exists(t / "d" / "samples.jsonl"));
}

TEST_F(CliTest, TrainingLowersTheTotalLoss) {
  const auto rows = read_trace(dir_->path() / "m" / "trace.csv");
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t e = 0; e < rows.size(); ++e) EXPECT_EQ(rows[e][0], static_cast<double>(e));
  EXPECT_LT(rows.back()[5], rows.front()[5]);
}

TEST_F(CliTest, AblatedTermsStayZeroInTheTrace) {
  TempDir t("train");
  ASSERT_EQ(cli({"-q", "train", "-d", data().string(), "-o", t.path().string(), "--epochs", "2",
                 "--ablate-ct", "--ablate-cyc", "--ablate-de"})
                .code,
            0);
  for (const auto& row : read_trace(t / "trace.csv")) {
    EXPECT_EQ(row[2], 0.0);
    EXPECT_EQ(row[3], 0.0);
    EXPECT_EQ(row[4], 0.0);
    EXPECT_DOUBLE_EQ(row[5], row[1]);  // λ0 = 1
  }
}

TEST_F(CliTest, ZeroEpochsWritesTheInitialParameters) {
  TempDir t("train");
  ASSERT_EQ(cli({"-q", "train", "-d", data().string(), "-o", t.path().string(), "--epochs", "0",
                 "--seed", "11", "--dim", "8"})
                .code,
            0);
  const Dataset d = load_split(data());
  ModelShape shape;
  shape.dim = 8;
  shape.raw_dim = d.samples.front().raw_patches.rows();
  shape.num_states = d.space.num_states();
  shape.num_objects = d.space.num_objects();
  EXPECT_TRUE(load_checkpoint(t / "model.ckpt") == ModelParams::init(shape, 11));
}

TEST_F(CliTest, DivergentTrainingExitsWithNumericCode) {
  TempDir t("train");
  const Outcome r = cli({"-q", "train", "-d", data().string(), "-o", t.path().string(),
                         "--epochs", "3", "--lr", "1e6"});
  EXPECT_EQ(r.code, cli::kExitNumeric);
  EXPECT_NE(r.err.find("epoch 0"), std::string::npos);
}

TEST_F(CliTest, InvalidThreadCountIsRejected) {
  ::setenv("TSCA_THREADS", "abc", 1);
  const Outcome r = cli({"-q", "eval", "-d", data().string(), "-m", model().string()});
  ::unsetenv("TSCA_THREADS");
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("TSCA_THREADS"), std::string::npos);
}

TEST_F(CliTest, ConfigPrecedenceIsFlagsOverFileOverPresetOverDefaults) {
  TempDir t("cfg");
  auto run_with = [&](const std::string& name, std::vector<std::string> extra) {
    std::vector<std::string> args = {"-q"};
    args.insert(args.end(), extra.begin(), extra.end());
    for (const std::string& a : {std::string("train"), std::string("-d"), data().string(),
                                 std::string("-o"), (t / name).string(), std::string("--epochs"),
                                 std::string("0")}) {
      args.push_back(a);
    }
    return args;
  };
  write_file(t / "file.cfg", "# experiment\nlambda2 = 0.3\nbatch = 4\n");
  write_file(t / "preset.cfg", "preset = mit-states\n");

  ASSERT_EQ(cli(run_with("builtin", {})).code, 0);
  EXPECT_EQ(config_value(t / "builtin", "lambda2"), "10");

  auto preset = run_with("preset", {});
  preset.insert(preset.end(), {"--preset", "mit-states"});
  ASSERT_EQ(cli(preset).code, 0);
  EXPECT_EQ(config_value(t / "preset", "lambda2"), "0.1");
  EXPECT_EQ(config_value(t / "preset", "lambda1"), "0.01");

  auto from_file = run_with("file", {"--config", (t / "file.cfg").string()});
  from_file.insert(from_file.end(), {"--preset", "mit-states"});
  ASSERT_EQ(cli(from_file).code, 0);
  EXPECT_EQ(config_value(t / "file", "lambda2"), "0.3");
  EXPECT_EQ(config_value(t / "file", "lambda1"), "0.01");
  EXPECT_EQ(config_value(t / "file", "batch"), "4");

  auto flags = run_with("flags", {"--config", (t / "file.cfg").string()});
  flags.insert(flags.end(), {"--lambda2", "0.5"});
  ASSERT_EQ(cli(flags).code, 0);
  EXPECT_EQ(config_value(t / "flags", "lambda2"), "0.5");
  EXPECT_EQ(config_value(t / "flags", "batch"), "4");

  // A preset named inside the config file applies below that file's own keys.
  ASSERT_EQ(cli(run_with("preset_file", {"--config", (t / "preset.cfg").string()})).code, 0);
  EXPECT_EQ(config_value(t / "preset_file", "lambda3"), "0.01");
}

TEST_F(CliTest, ConfigFileErrorsAreUsageErrors) {
  TempDir t("cfg");
  write_file(t / "bad.cfg", "lambda9 = 1\n");
  write_file(t / "broken.cfg", "epochs 3\n");
  const std::vector<std::string> tail = {"eval", "-d", data().string(), "-m", model().string()};

  auto with = [&](const std::string& file) {
    std::vector<std::string> a = {"-q", "--config", (t / file).string()};
    a.insert(a.end(), tail.begin(), tail.end());
    return cli(a);
  };
  Outcome r = with("bad.cfg");
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("lambda9"), std::string::npos);
  r = with("broken.cfg");
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("broken.cfg:1"), std::string::npos);
  EXPECT_EQ(cli({"eval", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(cli({}).code, cli::kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(cli({"train", "-d", data().string(), "-o", (t / "x").string(), "--preset", "imagenet"})
                .code,
            cli::kExitUsage);
}

TEST_F(CliTest, EvalEmitsMetricsForBothModes) {
  TempDir t("eval");
  const Outcome r = cli({"-q", "eval", "-d", data().string(), "-m", model().string(), "--mode",
                         "both", "-o", (t / "r.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(t / "r.json"), r.out);
  const auto doc = nlohmann::json::parse(r.out);
  for (const char* mode : {"closed", "open"}) {
    ASSERT_TRUE(doc.contains(mode)) << mode;
    for (const char* key : {"S", "U", "H", "AUC"}) {
      ASSERT_TRUE(doc[mode].contains(key)) << mode << " " << key;
      const double v = doc[mode][key];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_LT(doc["closed"]["candidate_count"].get<int>(), doc["open"]["candidate_count"].get<int>());
  EXPECT_EQ(doc["open"]["candidate_count"].get<int>(), 16);
}

TEST_F(CliTest, EvalDefaultsToFileBesideTheCheckpoint) {
  const Outcome r = cli({"-q", "eval", "-d", data().string(), "-m", model().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(model().parent_path() / "eval.json"), r.out);
}

TEST_F(CliTest, FilterQuantileZeroMatchesUnfilteredAndHalfCutsCandidates) {
  TempDir t("eval");
  auto open = [&](std::vector<std::string> extra) {
    std::vector<std::string> a = {"-q", "eval", "-d", data().string(), "-m", model().string(),
                                  "--mode", "open", "-o", (t / "r.json").string()};
    a.insert(a.end(), extra.begin(), extra.end());
    return cli(a);
  };
  const Outcome plain = open({});
  const Outcome q0 = open({"--filter-quantile", "0"});
  const Outcome q5 = open({"--filter-quantile", "0.5"});
  ASSERT_EQ(plain.code, 0);
  ASSERT_EQ(q0.code, 0);
  ASSERT_EQ(q5.code, 0);
  EXPECT_EQ(plain.out, q0.out);
  const auto a = nlohmann::json::parse(plain.out)["open"];
  const auto b = nlohmann::json::parse(q5.out)["open"];
  EXPECT_LT(b["candidate_count"].get<int>(), a["candidate_count"].get<int>());
  EXPECT_EQ(open({"--filter-quantile", "1.5"}).code, cli::kExitUsage);
}

TEST_F(CliTest, EvalWithMissingCheckpointIsAUsageError) {
  const Outcome r = cli({"eval", "-d", data().string(), "-m", (dir_->path() / "none.ckpt").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("checkpoint not found"), std::string::npos);
}

TEST_F(CliTest, EvalRejectsCorruptCheckpoint) {
  TempDir t("eval");
  write_file(t / "bad.ckpt", "TSCA1garbage");
  const Outcome r = cli({"eval", "-d", data().string(), "-m", (t / "bad.ckpt").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(CliTest, ExportedPlansMatchTheModelAndCycleRowsAreStochastic) {
  TempDir t("export");
  ASSERT_EQ(cli({"-q", "export-plans", "-d", data().string(), "-m", model().string(), "-s", "5",
                 "-o", t.path().string()})
                .code,
            0);
  const Dataset d = load_split(data());
  const ImageAnalysis a = analyze_image(load_checkpoint(model()), d.samples[5], d.space.pairs, {});

  const std::vector<std::pair<std::string, const Tensor*>> plans = {
      {"patch_comp_forward", &a.transport.patch_comp.forward.joint},
      {"patch_comp_backward", &a.transport.patch_comp.backward.joint},
      {"patch_prim_forward", &a.transport.patch_prim.forward.joint},
      {"patch_prim_backward", &a.transport.patch_prim.backward.joint},
      {"comp_prim_forward", &a.transport.comp_prim.forward.joint},
      {"comp_prim_backward", &a.transport.comp_prim.backward.joint},
      {"cycle", &a.cycle}};
  for (const auto& [name, expected] : plans) {
    std::ifstream csv(t / (name + ".csv"));
    const Tensor m = read_matrix_csv(csv);
    ASSERT_EQ(m.rows(), expected->rows()) << name;
    ASSERT_EQ(m.cols(), expected->cols()) << name;
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m.data()[i], expected->data()[i]) << name;

    std::ifstream pgm(t / (name + ".pgm"), std::ios::binary);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    pgm >> magic >> w >> h >> maxval;
    pgm.get();
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, m.cols());
    EXPECT_EQ(h, m.rows());
    EXPECT_EQ(maxval, 255u);
    const std::string pixels{std::istreambuf_iterator<char>(pgm), std::istreambuf_iterator<char>()};
    EXPECT_EQ(pixels.size(), w * h) << name;
  }

  std::ifstream csv(t / "cycle.csv");
  const Tensor cycle = read_matrix_csv(csv);
  ASSERT_EQ(cycle.rows(), d.space.pairs.size());
  ASSERT_EQ(cycle.cols(), d.space.pairs.size());
  for (std::size_t i = 0; i < cycle.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cycle.cols(); ++j) {
      EXPECT_GE(cycle(i, j), 0.0);
      s += cycle(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9) << "row " << i;
  }
}

TEST_F(CliTest, ExportRejectsOutOfRangeSample) {
  TempDir t("export");
  const Outcome r = cli({"export-plans", "-d", data().string(), "-m", model().string(), "-s",
                         "100000", "-o", t.path().string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("out of range"), std::string::npos);
}

TEST_F(CliTest, EvalRejectsModelFromAnotherDataset) {
  TempDir t("mismatch");
  ASSERT_EQ(cli({"-q", "generate", "-o", (t / "d").string(), "--states", "5"}).code, 0);
  const Outcome r = cli({"eval", "-d", (t / "d").string(), "-m", model().string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

}  // namespace
}  // namespace tsca
