#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "iresnet/datapipe.hpp"
#include "iresnet/metrics.hpp"

namespace fs = std::filesystem;
using namespace iresnet;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("iresnet_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(IRESNET_CLI_PATH) + " " + args + " > " +
                            (dir_ / "stdout.txt").string() + " 2> " + (dir_ / "stderr.txt").string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }
  std::string p(const std::string& rel) const { return (dir_ / rel).string(); }
  std::string stderr_text() const { return slurp(p("stderr.txt")); }

  static std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }

  void make_data(const std::string& name, int n = 24, int size = 16, int seed = 7) const {
    ASSERT_EQ(run("synth-data --n " + std::to_string(n) + " --size " + std::to_string(size) +
                  " --seed " + std::to_string(seed) + " --out-dir " + p(name)),
              0)
        << stderr_text();
  }

  fs::path dir_;
};

const char* kTiny = " --N 2 --M 2 --hidden 4 --kernel 3 ";

TEST_F(Cli, SynthDataManifestCountsAndDigest) {
  ASSERT_EQ(run("synth-data --n 40 --size 16 --seed 7 --out-dir " + p("a")), 0) << stderr_text();
  ASSERT_EQ(run("synth-data --n 40 --size 16 --seed 7 --out-dir " + p("b")), 0);
  const auto kv = read_key_values(p("a/manifest.txt"));
  EXPECT_EQ(kv.at("result.count"), "40");
  EXPECT_EQ(kv.at("seed"), "7");
  EXPECT_EQ(kv.at("result.height"), "16");
  EXPECT_EQ(slurp(p("a/dataset.bin")), slurp(p("b/dataset.bin")));
  EXPECT_EQ(load_dataset(p("a/dataset.bin")).size(), 40u);
}

TEST_F(Cli, SynthDataRejectsSmallSize) {
  EXPECT_NE(run("synth-data --n 4 --size 8 --out-dir " + p("a")), 0);
  EXPECT_FALSE(fs::exists(p("a/dataset.bin")));
}

TEST_F(Cli, ConfigFileLayering) {
  {
    std::ofstream cfg(p("cfg.txt"));
    cfg << "# synthetic run\nn = 12\nsize = 16\nseed = 3\n";
  }
  ASSERT_EQ(run("synth-data --config " + p("cfg.txt") + " --n 20 --out-dir " + p("a")), 0)
      << stderr_text();
  const auto kv = read_key_values(p("a/manifest.txt"));
  EXPECT_EQ(kv.at("result.count"), "20");  // flag wins
  EXPECT_EQ(kv.at("seed"), "3");           // file fills in
  {
    std::ofstream cfg(p("bad.txt"));
    cfg << "bogus = 1\n";
  }
  EXPECT_NE(run("synth-data --config " + p("bad.txt") + " --out-dir " + p("b")), 0);
  EXPECT_NE(stderr_text().find("bogus"), std::string::npos);
}

TEST_F(Cli, TrainZeroEpochsEqualsInit) {
  make_data("d");
  ASSERT_EQ(run(std::string("train --data ") + p("d/dataset.bin") + " --out-dir " + p("r") + kTiny +
                "--epochs 0 --seed 5"),
            0)
      << stderr_text();
  ASSERT_EQ(run(std::string("init --height 16 --width 16 --seed 5 --L 0.999") + kTiny + "--out " +
                p("init.ckpt")),
            0)
      << stderr_text();
  const auto a = read_tensor_file(p("r/model.ckpt"), kCheckpointMagic, 1);
  const auto b = read_tensor_file(p("init.ckpt"), kCheckpointMagic, 1);
  std::size_t compared = 0;
  for (const auto& t : b.tensors) {
    const auto& u = a.tensor(t.name);
    EXPECT_EQ(u.dims, t.dims) << t.name;
    EXPECT_EQ(u.data, t.data) << t.name;
    ++compared;
  }
  EXPECT_GT(compared, 0u);
  EXPECT_EQ(read_csv(p("r/metrics.csv")).size(), 1u);  // header only
}

TEST_F(Cli, TrainMetricsHaveOneRowPerEpoch) {
  make_data("d");
  ASSERT_EQ(run(std::string("train --data ") + p("d/dataset.bin") + " --out-dir " + p("r") + kTiny +
                "--epochs 3 --batch-size 4 --max-train 8 --quiet --checkpoint-every 2"),
            0)
      << stderr_text();
  const auto rows = read_csv(p("r/metrics.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"epoch", "train_loss", "val_psnr", "val_ssim"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][0], std::to_string(i));
    EXPECT_TRUE(std::isfinite(parse_double(rows[i][2])));
  }
  EXPECT_TRUE(fs::exists(p("r/checkpoints/epoch_0002.ckpt")));
  const auto meta = load_checkpoint(p("r/model.ckpt")).meta;
  EXPECT_EQ(meta.at("operator"), "blur");
  EXPECT_EQ(meta.at("objective"), "reconstruction");
}

TEST_F(Cli, TrainIsDeterministic) {
  make_data("d");
  const std::string common = std::string("train --data ") + p("d/dataset.bin") + kTiny +
                             "--epochs 2 --batch-size 4 --max-train 8 --quiet --seed 9 --out-dir ";
  ASSERT_EQ(run(common + p("a")), 0) << stderr_text();
  ASSERT_EQ(run(common + p("b")), 0);
  EXPECT_EQ(slurp(p("a/model.ckpt")), slurp(p("b/model.ckpt")));
}

TEST_F(Cli, ReconstructIdentityCheckpointReturnsInput) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> level(0, 255);
  ImageGrid img(16, 16);
  for (double& v : img.values()) v = level(rng) / 255.0;
  write_pgm(p("in.pgm"), img);
  ASSERT_EQ(run(std::string("init --identity --height 16 --width 16") + kTiny + "--out " +
                p("id.ckpt")),
            0)
      << stderr_text();
  ASSERT_EQ(run("reconstruct --checkpoint " + p("id.ckpt") + " --input " + p("in.pgm") +
                " --out-dir " + p("r")),
            0)
      << stderr_text();
  EXPECT_TRUE(read_pgm(p("r/recon_0000.pgm")) == img);
  const auto recon = load_dataset(p("r/reconstructions.bin"));
  EXPECT_TRUE(recon.images()[0] == read_pgm(p("in.pgm")));
  // no ground truth: images written, metrics omitted
  EXPECT_FALSE(fs::exists(p("r/metrics.csv")));
}

TEST_F(Cli, ReconstructMetricsMatchRecomputation) {
  make_data("d");
  ASSERT_EQ(run(std::string("train --data ") + p("d/dataset.bin") + " --out-dir " + p("m") + kTiny +
                "--epochs 1 --batch-size 4 --max-train 8 --quiet"),
            0)
      << stderr_text();
  ASSERT_EQ(run("reconstruct --checkpoint " + p("m/model.ckpt") + " --data " + p("d/dataset.bin") +
                " --split test --out-dir " + p("r")),
            0)
      << stderr_text();
  const auto rows = read_csv(p("r/metrics.csv"));
  const auto recon = load_dataset(p("r/reconstructions.bin")).images();
  const auto truth = load_dataset(p("d/dataset.bin")).test();
  ASSERT_EQ(rows.size(), truth.size() + 1);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    EXPECT_NEAR(parse_double(rows[i + 1][1]), psnr(recon[i], truth[i]), 1e-9);
    EXPECT_NEAR(parse_double(rows[i + 1][2]), ssim(recon[i], truth[i]), 1e-12);
    EXPECT_TRUE(fs::exists(p("r/recon_000" + std::to_string(i) + ".pgm")));
  }
}

TEST_F(Cli, ReconstructRejectsShapeMismatch) {
  ASSERT_EQ(run(std::string("init --identity --height 16 --width 16") + kTiny + "--out " +
                p("id.ckpt")),
            0);
  write_pgm(p("in.pgm"), ImageGrid(12, 16));
  EXPECT_NE(run("reconstruct --checkpoint " + p("id.ckpt") + " --input " + p("in.pgm") +
                " --out-dir " + p("r")),
            0);
  EXPECT_NE(stderr_text().find("16x16"), std::string::npos);
}

TEST_F(Cli, InversionStudyEmitsOneRowPerPairing) {
  make_data("d");
  const std::pair<const char*, const char*> pairing[] = {
      {"0.01", "0.999"}, {"0.025", "0.99"}, {"0.05", "0.95"}};
  std::string models;
  for (const auto& [delta, lip] : pairing) {
    const std::string ck = p(std::string("m") + delta + ".ckpt");
    ASSERT_EQ(run(std::string("init --height 16 --width 16 --L ") + lip + kTiny + "--out " + ck), 0)
        << stderr_text();
    models += std::string(" --model ") + delta + ":" + ck;
  }
  ASSERT_EQ(run("study inversion-error" + models + " --data " + p("d/dataset.bin") + " --out-dir " +
                p("s")),
            0)
      << stderr_text();
  const auto rows = read_csv(p("s/inversion_error.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1][0], "0.05");
  EXPECT_EQ(rows[3][0], "0.01");
  EXPECT_EQ(read_key_values(p("s/manifest.txt")).at("result.rows"), "3");
}

TEST_F(Cli, InversionStudyRejectsBrokenPairing) {
  make_data("d");
  ASSERT_EQ(run(std::string("init --height 16 --width 16 --L 0.9") + kTiny + "--out " + p("a.ckpt")), 0);
  ASSERT_EQ(run(std::string("init --height 16 --width 16 --L 0.99") + kTiny + "--out " + p("b.ckpt")), 0);
  // smaller delta paired with smaller L
  EXPECT_NE(run("study inversion-error --model 0.01:" + p("a.ckpt") + " --model 0.05:" + p("b.ckpt") +
                " --data " + p("d/dataset.bin") + " --out-dir " + p("s")),
            0);
  EXPECT_NE(run("study inversion-error --model 0.01:" + p("missing.ckpt") + " --data " +
                p("d/dataset.bin") + " --out-dir " + p("s")),
            0);
}

TEST_F(Cli, LocalApproxAndQualityStudies) {
  make_data("d");
  ASSERT_EQ(run(std::string("init --height 16 --width 16") + kTiny + "--out " + p("m.ckpt")), 0);
  ASSERT_EQ(run("study local-approx --checkpoint " + p("m.ckpt") + " --data " + p("d/dataset.bin") +
                " --out-dir " + p("a")),
            0)
      << stderr_text();
  EXPECT_EQ(read_csv(p("a/local_approx.csv")).size(), load_dataset(p("d/dataset.bin")).test().size() + 1);
  ASSERT_EQ(run("study approx-quality --checkpoint " + p("m.ckpt") + " --data " + p("d/dataset.bin") +
                " --out-dir " + p("q")),
            0)
      << stderr_text();
  EXPECT_EQ(read_csv(p("q/approx_quality.csv")).size(), 2u);
}

TEST_F(Cli, DirectionStudyTraceIsMonotone) {
  make_data("d");
  ASSERT_EQ(run(std::string("init --height 16 --width 16 --L 0.9 --init-fraction 0.5") + kTiny +
                "--out " + p("m.ckpt")),
            0);
  ASSERT_EQ(run("study direction --checkpoint " + p("m.ckpt") + " --data " + p("d/dataset.bin") +
                " --steps 15 --out-dir " + p("s")),
            0)
      << stderr_text();
  const auto rows = read_csv(p("s/direction_trace.csv"));
  ASSERT_GE(rows.size(), 2u);
  for (std::size_t i = 2; i < rows.size(); ++i)
    EXPECT_GE(parse_double(rows[i][1]), parse_double(rows[i - 1][1]));
  const auto kv = read_key_values(p("s/manifest.txt"));
  EXPECT_GE(parse_double(kv.at("result.norm_phi")), parse_double(kv.at("result.lower_bound")) - 1e-6);
  EXPECT_TRUE(fs::exists(p("s/direction.pgm")));
}

TEST_F(Cli, SaliencyStudyEmitsManualAssignments) {
  // 250 edge and 250 smooth pixels need a larger image than the 32x32 default
  ImageGrid board(96, 96);
  for (int r = 0; r < 96; ++r)
    for (int c = 0; c < 96; ++c) board(r, c) = ((r / 12 + c / 12) % 2 == 0) ? 0.2 : 0.8;
  write_pgm(p("board.pgm"), board);
  ASSERT_EQ(run(std::string("init --height 96 --width 96 --L 0.9") + kTiny + "--out " + p("m.ckpt")),
            0);
  ASSERT_EQ(run("study saliency --checkpoint " + p("m.ckpt") + " --image " + p("board.pgm") +
                " --count 120 --kmax 4 --references 3 --restarts 3 --out-dir " + p("s")),
            0)
      << stderr_text();
  for (const char* tag : {"manual_network", "manual_operator"}) {
    const auto rows = read_csv(p(std::string("s/assignments_") + tag + ".csv"));
    EXPECT_EQ(rows.size(), 501u) << tag;
  }
  EXPECT_EQ(read_csv(p("s/assignments_network.csv")).size(), 121u);
  EXPECT_EQ(read_csv(p("s/choose_k_operator.csv")).size(), 5u);
  EXPECT_TRUE(fs::exists(p("s/edges_strong.pgm")));
}

TEST_F(Cli, ErrorsExitNonzero) {
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("train --data " + p("nope.bin") + " --out-dir " + p("r")), 0);
  EXPECT_NE(run("reconstruct --checkpoint " + p("nope.ckpt") + " --input x.pgm --out-dir " + p("r")), 0);
  EXPECT_NE(run("study saliency --out-dir " + p("s")), 0);
  {
    std::ofstream bad(p("bad.ckpt"), std::ios::binary);
    bad << "NOTMAGIC and more bytes";
  }
  EXPECT_NE(run("study local-approx --checkpoint " + p("bad.ckpt") + " --data x --out-dir " + p("s")), 0);
}

}  // namespace
