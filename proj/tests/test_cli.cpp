#include "esd/cli.hpp"

#include "esd/engression.hpp"
#include "esd/io.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;
using esd::cli::run;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("esd_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    unsetenv("ESD_SEED");
  }
  void TearDown() override {
    unsetenv("ESD_SEED");
    fs::remove_all(dir_);
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int exec(std::vector<std::string> args) {
    args.insert(args.begin(), "esd");
    out_.str("");
    err_.str("");
    return run(args, out_, err_);
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

const std::string kData = ESD_DATA_DIR;

}  // namespace

TEST(CliStem, StripsKnownExtensions) {
  EXPECT_EQ(esd::cli::stem("a/b.json"), "a/b");
  EXPECT_EQ(esd::cli::stem("a/b.csv"), "a/b");
  EXPECT_EQ(esd::cli::stem("a/b.txt"), "a/b.txt");
}

TEST_F(Cli, GenDataIsDeterministicPerSeed) {
  ASSERT_EQ(exec({"gen-data", "--n", "200", "--seed", "4", "--out", path("a.csv")}), 0) << err_.str();
  ASSERT_EQ(exec({"gen-data", "--n", "200", "--seed", "4", "--out", path("b.csv")}), 0);
  ASSERT_EQ(exec({"gen-data", "--n", "200", "--seed", "5", "--out", path("c.csv")}), 0);
  const auto a = esd::read_points(path("a.csv"));
  EXPECT_EQ(a.rows(), 200);
  EXPECT_EQ(a, esd::read_points(path("b.csv")));
  EXPECT_NE(a, esd::read_points(path("c.csv")));
  EXPECT_TRUE(fs::exists(path("a.manifest.json")));
}

TEST_F(Cli, SeedEnvironmentOverridesFlag) {
  ASSERT_EQ(exec({"gen-data", "--n", "50", "--seed", "4", "--out", path("a.csv")}), 0);
  setenv("ESD_SEED", "4", 1);
  ASSERT_EQ(exec({"gen-data", "--n", "50", "--seed", "9", "--out", path("b.csv")}), 0);
  EXPECT_EQ(esd::read_points(path("a.csv")), esd::read_points(path("b.csv")));
}

TEST_F(Cli, PartialNoiseOptionsAreUsageError) {
  EXPECT_EQ(exec({"gen-data", "--n", "10", "--noise-beta", "1.4", "--out", path("a.csv")}), esd::cli::kUsage);
  EXPECT_FALSE(fs::exists(path("a.csv")));
}

TEST_F(Cli, TrainZeroEpochsWritesLoadableCheckpoint) {
  ASSERT_EQ(exec({"gen-data", "--n", "100", "--out", path("d.csv")}), 0);
  ASSERT_EQ(exec({"train", "--data", path("d.csv"), "--epochs", "0", "--out", path("m.json")}), 0) << err_.str();
  EXPECT_NO_THROW(esd::Checkpoint::load(path("m.json")));
  EXPECT_TRUE(fs::exists(path("m.loss.csv")));
  EXPECT_TRUE(fs::exists(path("m.manifest.json")));
}

TEST_F(Cli, ScoreFieldAndQuiverPlot) {
  ASSERT_EQ(exec({"score-field", "--source", "oracle", "--grid", "20", "--out", path("f.csv")}), 0) << err_.str();
  const auto t = esd::read_csv(path("f.csv"));
  EXPECT_EQ(t.data.rows(), 400);
  EXPECT_EQ(t.header, (std::vector<std::string>{"y0", "y1", "s0", "s1"}));
  ASSERT_EQ(exec({"plot", "--in", path("f.csv"), "--kind", "quiver", "--title", "field", "--out", path("f.svg")}), 0)
      << err_.str();
  const std::string svg = esd::read_file(path("f.svg"));
  EXPECT_EQ(count(svg, "class=\"arrow\""), 400u);
  EXPECT_NE(svg.find("<title>field</title>"), std::string::npos);
}

TEST_F(Cli, TwoSourcesWriteAgreement) {
  ASSERT_EQ(exec({"score-field", "--source", "oracle", "--source", "is", "--grid", "5", "--particles", "20000",
                  "--draws", "256", "--out", path("f.csv")}),
            0)
      << err_.str();
  const auto agree = esd::read_csv(path("f.agreement.csv"));
  EXPECT_EQ(agree.data.rows(), 25);
  agree.require_columns({"y0", "y1", "mse", "cosine"}, "agreement");
  EXPECT_TRUE(fs::exists(path("f.is.csv")));
}

TEST_F(Cli, PlotRejectsEmptyOrMalformedCsv) {
  esd::write_file(path("empty.csv"), "x0,x1\n");
  EXPECT_EQ(exec({"plot", "--in", path("empty.csv"), "--kind", "scatter", "--out", path("e.svg")}), esd::cli::kUsage);
  EXPECT_FALSE(fs::exists(path("e.svg")));
  esd::write_file(path("bad.csv"), "a,b\n1,2\n");
  EXPECT_NE(exec({"plot", "--in", path("bad.csv"), "--kind", "quiver", "--out", path("b.svg")}), 0);
  EXPECT_NE(err_.str().find("y0"), std::string::npos);
  EXPECT_EQ(exec({"plot", "--in", path("missing.csv"), "--out", path("m.svg")}), esd::cli::kIo);
}

TEST_F(Cli, RichardsonColumnsAndErrors) {
  ASSERT_EQ(exec({"richardson", "--source", "conjugate", "--grid", "4", "--draws", "64", "--out", path("r.csv")}), 0)
      << err_.str();
  const auto t = esd::read_csv(path("r.csv"));
  EXPECT_EQ(t.data.rows(), 16);
  t.require_columns({"y0", "y1", "s_eps1_0", "s_eps1_1", "s_eps2_0", "s_eps2_1", "s_re_0", "s_re_1"}, "richardson");
  EXPECT_EQ(exec({"richardson", "--source", "conjugate", "--eps1", "0.1", "--eps2", "0.1", "--out", path("x.csv")}),
            esd::cli::kUsage);
  EXPECT_EQ(exec({"richardson", "--source", "nope", "--out", path("x.csv")}), esd::cli::kUsage);
}

TEST_F(Cli, UnknownSubcommandIsUsageError) {
  EXPECT_EQ(exec({"frobnicate"}), esd::cli::kUsage);
  EXPECT_EQ(exec({"sample", "--model", path("none.json"), "--trace-dir", path("t")}), esd::cli::kIo);
}

TEST_F(Cli, SampleWritesTraceAndSeries) {
  ASSERT_EQ(exec({"sample", "--model", kData + "/checkpoints/gaussian.json", "--chains", "40", "--steps", "2",
                  "--draws", "4", "--seed", "1,2", "--clean-n", "200", "--trace-dir", path("trace")}),
            0)
      << err_.str();
  EXPECT_TRUE(fs::exists(path("trace/level_00.csv")));
  EXPECT_TRUE(fs::exists(path("trace/final.csv")));
  EXPECT_TRUE(fs::exists(path("trace/manifest.json")));
  const auto ed = esd::read_csv(path("trace/energy_distance.csv"));
  ed.require_columns({"level", "sigma", "mean", "std"}, "series");
  EXPECT_EQ(ed.data.rows(), 10);
  ASSERT_EQ(exec({"plot", "--in", path("trace/energy_distance.csv"), "--kind", "series", "--out", path("s.svg")}), 0)
      << err_.str();
  ASSERT_EQ(exec({"plot", "--in", path("trace/final.csv"), "--kind", "scatter", "--out", path("p.svg")}), 0);
}

TEST_F(Cli, EstimateNoiseRoundTrip) {
  ASSERT_EQ(exec({"gen-data", "--n", "20000", "--seed", "3", "--out", path("prior.csv")}), 0);
  ASSERT_EQ(exec({"gen-data", "--n", "64", "--seed", "4", "--noise-beta", "1.4", "--noise-lambda", "1.8", "--noise-s",
                  "0.8", "--out", path("noisy.csv")}),
            0);
  ASSERT_EQ(exec({"estimate-noise", "--noisy-data", path("noisy.csv"), "--prior-data", path("prior.csv"),
                  "--ref-particles", "50000", "--draws", "128", "--fix-s", "0.8", "--budget", "49", "--out",
                  path("est.json")}),
            0)
      << err_.str();
  const auto j = nlohmann::json::parse(esd::read_file(path("est.json")));
  EXPECT_NEAR(j.at("beta").get<double>(), 1.4, 0.25);
  EXPECT_NEAR(j.at("lambda").get<double>(), 1.8, 0.5);
  EXPECT_EQ(j.at("s").get<double>(), 0.8);
}
