// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "edmb/train.hpp"
#include "scratch_dir.hpp"
#include "synthetic.hpp"

namespace edmb {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "edmb");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Dataset plus a two-step checkpoint, built once for the whole suite.
class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = testing::scratch_dir("cli");
    testing::ShapeCorpusOptions o;
    o.count = 2;
    o.size = 48;
    corpus_ = testing::make_shape_corpus(o);
    testing::write_corpus(corpus_, (root_ / "data").string());
    std::ofstream(root_ / "tiny.cfg") << "batch_size = 1\nlr_fresh = 1e-3\nmax_steps = 2\n"
                                          "model.embed_dim = 8\nmodel.depths = 1,1,1\nmodel.state_dim = 4\n"
                                          "model.pos_grid = 8\nmodel.decoder_width = 8\nmodel.head_width = 4\n"
                                          "model.head_depth = 1\nmodel.sft_hidden = 4\n";
    const auto r = run({"train", "--config", (root_ / "tiny.cfg").string(), "--data", (root_ / "data").string(),
                        "--list", (root_ / "data" / "list.txt").string(), "--out", (root_ / "s1").string(), "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
    ckpt_ = (root_ / "s1" / "last.ckpt").string();
    image_ = (root_ / "data" / "images" / (corpus_[0].id + ".ppm")).string();
  }

  static inline fs::path root_;
  static inline std::vector<DatasetSample> corpus_;
  static inline std::string ckpt_, image_;
};

TEST(CliHelp, MatchesGoldenFile) {
  const auto r = run({"--help-all"});
  EXPECT_EQ(r.code, 0);
  std::string golden = slurp(fs::path(EDMB_GOLDEN_DIR) / "help_all.txt");
  golden.erase(0, golden.find('\n') + 1);  // licence line
  EXPECT_EQ(r.out, golden);
}

TEST(CliErrors, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"infer"}).code, 2);
  EXPECT_EQ(run({"check", "--suite", "nonsense"}).code, 2);
  EXPECT_EQ(run({"bench", "--shape", "3x32"}).code, 2);
  EXPECT_EQ(run({"train", "--config", "/nonexistent.cfg", "--data", ".", "--list", ".", "--out", "x"}).code, 2);
}

TEST(CliErrors, RuntimeFailuresExitOne) {
  const auto dir = testing::scratch_dir("cli_runtime");
  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  std::ofstream(dir / "img.pgm") << "P5\n2 2\n255\nabcd";
  const auto r = run({"infer", "--ckpt", (dir / "bad.ckpt").string(), "--image", (dir / "img.pgm").string(), "--out",
                      (dir / "o.pgm").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad.ckpt"), std::string::npos) << r.err;
  std::ofstream(dir / "broken.cfg") << "batch_size = lots\n";
  const auto t = run({"train", "--config", (dir / "broken.cfg").string(), "--data", dir.string(), "--list",
                      (dir / "broken.cfg").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(t.code, 1);
  EXPECT_NE(t.err.find("broken.cfg:1"), std::string::npos) << t.err;
}

TEST(CliBench, ReportsCounts) {
  const auto r = run({"bench", "--shape", "3x64x64"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* key : {"params=", "flops=", "gflops=", "params.highres_encoder=5088"})
    EXPECT_NE(r.out.find(key), std::string::npos) << key;
  EXPECT_EQ(run({"bench", "--shape", "3x40x64"}).code, 1);
}

TEST(CliCheck, OracleSuitePasses) {
  const auto r = run({"check", "--suite", "oracle"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("checks passed"), std::string::npos);
}

TEST_F(CliFixture, InferDefaultsToMeanProbability) {
  const auto out = root_ / "infer";
  fs::create_directories(out);
  auto r = run({"infer", "--ckpt", ckpt_, "--image", image_, "--out", (out / "a.pgm").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"infer", "--ckpt", ckpt_, "--image", image_, "--out", (out / "b.pgm").string(), "--gamma", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(out / "a.pgm"), slurp(out / "b.pgm"));
  const Image img = read_image((out / "a.pgm").string());
  EXPECT_EQ(img.height, 48);
  EXPECT_EQ(img.width, 48);
}

TEST_F(CliFixture, SweepWritesElevenMaps) {
  const auto out = root_ / "sweep";
  const auto r = run({"sweep", "--ckpt", ckpt_, "--image", image_, "--out-dir", out.string(), "--id", "s"});
  ASSERT_EQ(r.code, 0) << r.err;
  int n = 0;
  for (const auto& e : fs::directory_iterator(out)) n += e.path().extension() == ".pgm";
  EXPECT_EQ(n, 11);
  EXPECT_TRUE(fs::exists(out / "s_g-5.pgm"));
  EXPECT_TRUE(fs::exists(out / "s_g-2.5.pgm"));
  EXPECT_FALSE(fs::exists(out / "s_g0.5.pgm"));
  // gamma 0 in the sweep is the infer default
  const auto one = root_ / "sweep_one";
  ASSERT_EQ(run({"infer", "--ckpt", ckpt_, "--image", image_, "--out", (root_ / "g0.pgm").string()}).code, 0);
  EXPECT_EQ(slurp(out / "s_g0.pgm"), slurp(root_ / "g0.pgm"));
  EXPECT_EQ(run({"sweep", "--ckpt", ckpt_, "--image", image_, "--out-dir", one.string(), "--gammas", "0:1:1"}).code, 0);
  EXPECT_EQ(std::distance(fs::directory_iterator(one), fs::directory_iterator{}), 1);
  EXPECT_EQ(run({"sweep", "--ckpt", ckpt_, "--image", image_, "--out-dir", one.string(), "--gammas", "0:1"}).code, 1);
}

TEST_F(CliFixture, EvalOfGroundTruthScoresOne) {
  const auto data = root_ / "data";
  const auto r = run({"eval", "--pred", (data / "labels").string(), "--gt", (data / "labels").string(), "--list",
                      (data / "list.txt").string(), "--no-nms"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ods=1.000000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("ois=1.000000"), std::string::npos) << r.out;
}

TEST_F(CliFixture, EvalMultigranularityReadsSweeps) {
  const auto pred = root_ / "multi";
  for (const auto& s : corpus_) {
    const auto r = run({"sweep", "--ckpt", ckpt_, "--image", (root_ / "data" / "images" / (s.id + ".ppm")).string(),
                        "--out-dir", pred.string(), "--gammas", "-1:1:3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto data = root_ / "data";
  const auto r = run({"eval", "--pred", pred.string(), "--gt", (data / "labels").string(), "--list",
                      (data / "list.txt").string(), "--multigranularity", "--thresholds", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ods="), std::string::npos);
  // a single-map eval of the same directory finds no <id>.pgm files
  EXPECT_EQ(run({"eval", "--pred", pred.string(), "--gt", (data / "labels").string(), "--list",
                 (data / "list.txt").string()})
                .code,
            1);
}

TEST_F(CliFixture, ResumeAndStageTwo) {
  const auto data = root_ / "data";
  const std::string cfg = (root_ / "tiny.cfg").string();
  auto r = run({"train", "--config", cfg, "--data", data.string(), "--list", (data / "list.txt").string(), "--out",
                (root_ / "s2").string(), "--stage", "fine", "--quiet"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("init-from"), std::string::npos) << r.err;
  r = run({"train", "--config", cfg, "--data", data.string(), "--list", (data / "list.txt").string(), "--out",
           (root_ / "s2").string(), "--stage", "fine", "--init-from", ckpt_});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("step 2 loss"), std::string::npos) << r.out;
  r = run({"train", "--config", cfg, "--data", data.string(), "--list", (data / "list.txt").string(), "--out",
           (root_ / "s1b").string(), "--resume", ckpt_, "--steps", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.find("step 2 loss"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("step 3 loss"), std::string::npos) << r.out;
}

}  // namespace
}  // namespace edmb
