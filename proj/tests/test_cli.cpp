#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "tucan/cli.hpp"

using namespace tucan;
using namespace tucan::fixtures;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tucan");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  LogCapture quiet;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(Cli, UsageErrorsExitWithConfigCode) {
  EXPECT_EQ(cli({}).code, kExitConfig);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--no-such-flag"}).code, kExitConfig);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(Cli, UnknownConfigKeyWritesNothing) {
  TempDir dir("cli_key");
  const auto out = dir / "run";
  const auto r = cli({"train", "--set", "train.rhoo=3", "--out", out.string(), "--dry-run"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("train.rhoo"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out));

  std::ofstream(dir / "bad.ini") << "[model]\nscale = toy\nwidth = 3\n";
  const auto f = cli({"train", "--config", (dir / "bad.ini").string(), "--out", out.string()});
  EXPECT_EQ(f.code, kExitConfig);
  EXPECT_NE(f.err.find("model.width"), std::string::npos) << f.err;
  EXPECT_FALSE(fs::exists(out));
  EXPECT_EQ(cli({"train", "--set", "train.rho=zero", "--dry-run", "--out", out.string()}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--set", "model.capsule_dim=7", "--dry-run", "--out", out.string()}).code, kExitOk);
}

TEST(Cli, BadCheckpointExitsWithArtifactCode) {
  TempDir dir("cli_ckpt");
  write_fixture_set(dir / "data", 2, 32, 1);
  std::ofstream(dir / "junk.ckpt") << "definitely not a checkpoint";
  const auto r = cli({"evaluate", "--checkpoint", (dir / "junk.ckpt").string(), "--data", (dir / "data").string(),
                      "--out", (dir / "ev").string()});
  EXPECT_EQ(r.code, kExitArtifact);
  EXPECT_NE(r.err.find("artifact error"), std::string::npos);
  EXPECT_EQ(cli({"colorize", "--checkpoint", (dir / "missing.ckpt").string(), (dir / "data/img_000.png").string()}).code,
            kExitArtifact);
  EXPECT_EQ(cli({"inspect", "--checkpoint", (dir / "junk.ckpt").string()}).code, kExitArtifact);
  EXPECT_EQ(cli({"evaluate", "--stub", "gray", "--data", (dir / "nowhere").string(), "--out", (dir / "ev").string()}).code,
            kExitArtifact);
}

TEST(Cli, DryRunManifestShowsResolvedPlan) {
  TempDir dir("cli_dry");
  const auto prog = cli({"train", "--scheme", "progressive", "--dry-run", "--out", (dir / "p").string()});
  ASSERT_EQ(prog.code, kExitOk) << prog.err;
  const auto pm = read_json(dir / "p" / "manifest.json");
  EXPECT_EQ(pm["plan"]["rho"], 10);
  EXPECT_EQ(pm["plan"]["xi"], 20);
  EXPECT_EQ(pm["plan"]["total_epochs"], 70);
  EXPECT_EQ(pm["plan"]["levels"].size(), 5u);
  EXPECT_TRUE(pm["dry_run"].get<bool>());

  const auto e2e = cli({"train", "--dry-run", "--out", (dir / "e").string()});
  ASSERT_EQ(e2e.code, kExitOk);
  const auto em = read_json(dir / "e" / "manifest.json");
  EXPECT_EQ(em["plan"]["epochs"], 40);
  EXPECT_EQ(em["plan"]["batch_size"], 32);
  EXPECT_EQ(em["plan"]["base_lr"], 2e-3);
  EXPECT_NE(e2e.out.find("\"total_epochs\": 40"), std::string::npos);

  const auto ft = cli({"finetune", "--checkpoint", "later.ckpt", "--dry-run", "--out", (dir / "f").string()});
  ASSERT_EQ(ft.code, kExitOk) << ft.err;
  const auto fm = read_json(dir / "f" / "manifest.json");
  EXPECT_EQ(fm["plan"]["epochs"], 35);
  EXPECT_EQ(fm["plan"]["split_lr"]["conv"], 2e-4);
  EXPECT_EQ(fm["plan"]["split_lr"]["capsule"], 2e-3);
  EXPECT_EQ(cli({"finetune", "--dry-run", "--out", (dir / "g").string()}).code, kExitConfig);
}

TEST(Cli, ConfigFileAndOverridesCompose) {
  TempDir dir("cli_cfg");
  std::ofstream(dir / "run.ini") << "# comment\n[train]\nscheme = progressive\nrho = 3\nxi = 4\nlevels = PCU, 2ndUP\n";
  const auto r = cli({"train", "--config", (dir / "run.ini").string(), "--set", "train.xi=5", "--dry-run", "--out",
                      (dir / "o").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto m = read_json(dir / "o" / "manifest.json");
  EXPECT_EQ(m["plan"]["rho"], 3);
  EXPECT_EQ(m["plan"]["xi"], 5);
  EXPECT_EQ(m["plan"]["total_epochs"], 11);
  EXPECT_EQ(m["plan"]["levels"], nlohmann::json({"PCU", "2ndUP"}));
}

TEST(Cli, InspectPrintsTraceAndTemplateListsKeys) {
  const auto r = cli({"inspect"});
  ASSERT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("PCD/PCU (X)"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("levels 15 16 20 24 28 224"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("Q 261"), std::string::npos);
  const auto toy = cli({"inspect", "--set", "model.scale=toy"});
  EXPECT_NE(toy.out.find("levels 4 5 6 7 8 64"), std::string::npos) << toy.out;
  const auto t = cli({"config-template"});
  ASSERT_EQ(t.code, kExitOk);
  for (const auto& k : config_schema()) EXPECT_NE(t.out.find(k.key.substr(k.key.find('.') + 1) + " = "), std::string::npos) << k.key;
}

TEST(Cli, StubEvaluationUsesEnvironmentDataRoot) {
  TempDir dir("cli_env");
  write_fixture_set(dir / "data", 3, 40, 2);
  ::setenv("TUCAN_DATA_ROOT", (dir / "data").string().c_str(), 1);
  const auto gray = cli({"evaluate", "--stub", "gray", "--set", "model.scale=toy", "--out", (dir / "g").string()});
  const auto perfect = cli({"evaluate", "--stub", "perfect", "--set", "model.scale=toy", "--out", (dir / "p").string(),
                            "--lpips-plugin", "echo 0.5"});
  ::unsetenv("TUCAN_DATA_ROOT");
  ASSERT_EQ(gray.code, kExitOk) << gray.err;
  ASSERT_EQ(perfect.code, kExitOk) << perfect.err;
  std::ifstream g(dir / "g" / "report.tsv"), p(dir / "p" / "report.tsv");
  const auto rg = read_report(g), rp = read_report(p);
  EXPECT_EQ(rg.rows.size(), 3u);
  EXPECT_LT(rg.mean_psnr, rp.mean_psnr);
  EXPECT_FALSE(rg.mean_lpips);
  ASSERT_TRUE(rp.mean_lpips);
  EXPECT_EQ(*rp.mean_lpips, 0.5);
  EXPECT_NE(gray.out.find("LPIPS n/a"), std::string::npos);
}

TEST(Cli, TrainColorizeEvaluateRoundTrip) {
  TempDir dir("cli_e2e");
  write_fixture_set(dir / "data", 4, 80, 3);
  const std::string data = (dir / "data").string(), run = (dir / "run").string();
  const auto t = cli({"train", "--data", data, "--out", run, "--seed", "4", "--set", "model.scale=toy", "--set",
                      "train.epochs=1", "--set", "train.batch_size=2"});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  const auto ckpt = (dir / "run" / "last.ckpt").string();
  ASSERT_TRUE(fs::exists(ckpt));
  const auto man = read_json(dir / "run" / "manifest.json");
  EXPECT_EQ(man["epochs"].size(), 1u);

  const auto info = cli({"inspect", "--checkpoint", ckpt});
  EXPECT_NE(info.out.find("epoch 1"), std::string::npos) << info.out;
  EXPECT_NE(info.out.find("level final"), std::string::npos);

  std::mt19937_64 rng(5);
  const RgbImage wide = resize_rgb(scene(70, rng), 50, 70);
  write_image(dir / "in.png", wide);
  const auto c = cli({"colorize", "--checkpoint", ckpt, "--out", (dir / "col").string(), (dir / "in.png").string()});
  ASSERT_EQ(c.code, kExitOk) << c.err;
  const auto colored = read_image(dir / "col" / "in_color.png").rgb;
  EXPECT_EQ(colored.height, 50);
  EXPECT_EQ(colored.width, 70);
  const auto Lin = rgb_to_lab(wide).L, Lout = rgb_to_lab(colored).L;
  double worst = 0;
  for (std::size_t i = 0; i < Lin.size(); ++i) worst = std::max(worst, std::abs(Lin[i] - Lout[i]));
  EXPECT_LE(worst, 1.0);

  const auto e = cli({"evaluate", "--checkpoint", ckpt, "--data", data, "--out", (dir / "ev").string()});
  ASSERT_EQ(e.code, kExitOk) << e.err;
  std::ifstream rs(dir / "ev" / "report.tsv");
  auto rep = read_report(rs);
  EXPECT_EQ(rep.rows.size(), 4u);
  const double stored = rep.mean_psnr;
  rep.recompute_means();
  EXPECT_EQ(rep.mean_psnr, stored);

  const auto resume = cli({"train", "--data", data, "--out", run, "--checkpoint", ckpt, "--set", "model.scale=toy",
                           "--set", "train.epochs=2", "--set", "train.batch_size=2"});
  ASSERT_EQ(resume.code, kExitOk) << resume.err;
  const auto again = read_json(dir / "run" / "manifest.json");
  ASSERT_EQ(again["epochs"].size(), 1u);
  EXPECT_EQ(again["epochs"][0]["epoch"], 1);
  EXPECT_EQ(again["start_epoch"], 1);
}
