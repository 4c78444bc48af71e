#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" + SWINTEXT_CLI + "' " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("swintext_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string cfg(const char* name) { return std::string(SWINTEXT_CONFIG_DIR) + "/" + name; }

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* cmd : {"train", "infer", "eval", "verify", "bench", "gen-data", "params"})
    EXPECT_NE(r.out.find(cmd), std::string::npos) << cmd;
  EXPECT_EQ(run("train --help").code, 0);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --bogus").code, 2);
  EXPECT_EQ(run("train --out /tmp/x").code, 2);
  EXPECT_EQ(run("verify --suite nope").code, 2);
  EXPECT_EQ(run("params --stages 6").code, 2);
  EXPECT_EQ(run("bench --repeat 0").code, 2);
}

TEST(Cli, BadInputExitsOne) {
  const auto dir = scratch("empty");
  fs::create_directories(dir);
  const auto r = run("train --data " + dir.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("prompts.tsv"), std::string::npos) << r.out;
  fs::remove_all(dir);
}

TEST(Cli, ParamsReportsShapes) {
  const auto r = run("params");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Full SwinTextUNet | 4-Stage (Ours)"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("7 -> 14 -> 28 -> 56 -> 112"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("768 -> 384 -> 192 -> 96 -> 48"), std::string::npos) << r.out;
  const auto nt = run("params --no-text --config " + cfg("toy.cfg"));
  ASSERT_EQ(nt.code, 0);
  EXPECT_NE(nt.out.find("w/o Text Guidance"), std::string::npos) << nt.out;
}

TEST(Cli, BenchCsv) {
  const auto r = run("bench --grid 56 --window 7 --repeat 1");
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream in(r.out);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "grid,window,tokens,windowed_macs,global_macs,ratio,expected_ratio,windowed_ms,global_ms");
  EXPECT_EQ(row.rfind("56,7,3136,", 0), 0u) << row;
  EXPECT_NE(row.find(",0.015625,0.015625,"), std::string::npos) << row;
}

TEST(Cli, VerifyMetricsPasses) {
  const auto r = run("verify --suite metrics");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("checks passed"), std::string::npos);
}

TEST(Cli, VerifyFaultFails) {
  const auto r = run("verify --suite gradcheck --seeds 1 --fault 0.01");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("FAILED"), std::string::npos);
}

TEST(Cli, GenDataHonorsSeedEnvironment) {
  const auto a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  ASSERT_EQ(run("gen-data --out " + a.string() + " -n 5 --size 32", "SWINTEXT_SEED=11").code, 0);
  ASSERT_EQ(run("gen-data --out " + b.string() + " -n 5 --size 32 --seed 11").code, 0);
  ASSERT_EQ(run("gen-data --out " + c.string() + " -n 5 --size 32 --seed 12").code, 0);
  EXPECT_EQ(slurp(a / "train" / "images" / "sample_0000.pgm"), slurp(b / "train" / "images" / "sample_0000.pgm"));
  EXPECT_NE(slurp(a / "train" / "images" / "sample_0000.pgm"), slurp(c / "train" / "images" / "sample_0000.pgm"));
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Cli, TrainInferEvalWorkflow) {
  const auto root = scratch("flow");
  const auto data = root / "data", run_dir = root / "run", pred = root / "pred";
  ASSERT_EQ(run("gen-data --out " + data.string() + " -n 6 --size 32 --seed 1").code, 0);
  const auto t = run("train --config " + cfg("ablation.cfg") + " --data " + data.string() + " --out " +
                     run_dir.string() + " --epochs 2 --seed 3");
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("variant: Full SwinTextUNet"), std::string::npos) << t.out;
  for (const char* f : {"metrics.csv", "loss.svg", "last.stun", "best.stun", "variant.txt"})
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  EXPECT_EQ(slurp(run_dir / "metrics.csv").rfind("epoch,split,loss,dice,iou,lr\n", 0), 0u);

  fs::create_directories(pred);
  std::ifstream tsv(data / "test" / "prompts.tsv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(tsv, line)) {
    const auto tab = line.find('\t');
    const std::string file = line.substr(0, tab), prompt = line.substr(tab + 1);
    const auto r = run("infer --ckpt " + (run_dir / "last.stun").string() + " --image " +
                       (data / "test" / "images" / file).string() + " --text \"" + prompt + "\" --out " +
                       (pred / file).string());
    ASSERT_EQ(r.code, 0) << r.out;
    ++n;
  }
  ASSERT_GT(n, 0u);
  const auto csv = root / "scores.csv";
  const auto e = run("eval --pred " + pred.string() + " --gt " + (data / "test" / "masks").string() + " --csv " +
                     csv.string());
  ASSERT_EQ(e.code, 0) << e.out;
  const std::string text = slurp(csv);
  EXPECT_EQ(text.rfind("image,dice,iou,tp,fp,fn\n", 0), 0u);
  EXPECT_NE(text.find("\nmean,"), std::string::npos);

  fs::remove(pred / fs::directory_iterator(pred)->path().filename());
  EXPECT_EQ(run("eval --pred " + pred.string() + " --gt " + (data / "test" / "masks").string()).code, 1);
  EXPECT_EQ(run("infer --ckpt " + (run_dir / "last.stun").string() + " --image " + (data / "test" / "images").string() +
                "/sample_0005.pgm --text \"\" --out " + (root / "x.pgm").string())
                .code,
            1);
  fs::remove_all(root);
}

TEST(Cli, TrainIsDeterministicAcrossProcesses) {
  const auto root = scratch("det");
  ASSERT_EQ(run("gen-data --out " + (root / "d").string() + " -n 4 --size 32 --seed 2").code, 0);
  for (const char* out : {"a", "b"}) {
    const auto r = run("train --quiet --config " + cfg("ablation.cfg") + " --data " + (root / "d").string() +
                       " --out " + (root / out).string() + " --epochs 1");
    ASSERT_EQ(r.code, 0) << r.out;
  }
  EXPECT_EQ(slurp(root / "a" / "metrics.csv"), slurp(root / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(root / "a" / "last.stun"), slurp(root / "b" / "last.stun"));
  fs::remove_all(root);
}
