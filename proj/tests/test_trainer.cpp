#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"
#include "tucan/checkpoint.hpp"
#include "tucan/trainer.hpp"

using namespace tucan;
using namespace tucan::fixtures;

namespace {

const BinTable& bins() {
  static const BinTable t = build_gamut_bins(10.0, 4);
  return t;
}

std::vector<SampleRecord> toy_data(int count, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<SampleRecord> out;
  for (int i = 0; i < count; ++i)
    out.push_back(prepare_sample({scene(64, rng), false}, 64, bins(), {}, "s" + std::to_string(i)));
  return out;
}

NetworkConfig toy_config(std::uint64_t seed = 5) {
  auto c = NetworkConfig::toy_scale(bins().size());
  c.seed = seed;
  return c;
}

TrainPlan small_plan(Scheme s) {
  TrainPlan p = TrainPlan::canonical(s);
  p.batch_size = 2;
  p.epochs = 1;
  p.rho = 1;
  p.xi = 2;
  p.seed = 3;
  return p;
}

void expect_same_state(TucanNet& a, TucanNet& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    EXPECT_EQ(pa[i]->m, pb[i]->m) << pa[i]->name;
    EXPECT_EQ(pa[i]->v, pb[i]->v) << pa[i]->name;
    EXPECT_EQ(pa[i]->steps, pb[i]->steps) << pa[i]->name;
  }
  const auto ba = a.buffers(), bb = b.buffers();
  ASSERT_EQ(ba.size(), bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(*ba[i].data, *bb[i].data) << ba[i].name;
}

}  // namespace

TEST(Schedule, CanonicalProgressiveIsExhaustive) {
  const auto plan = TrainPlan::canonical(Scheme::progressive);
  EXPECT_EQ(plan.total_epochs(), 70);
  const Level order[] = {Level::pcu, Level::up1, Level::up2, Level::up3, Level::up4};
  for (int e = 0; e < 70; ++e) {
    const auto ph = schedule(e, plan);
    if (e < 50) {
      EXPECT_EQ(ph.level, order[e / 10]) << e;
      EXPECT_FALSE(ph.is_final);
      EXPECT_EQ(ph.index, e / 10);
    } else {
      EXPECT_EQ(ph.level, Level::final) << e;
      EXPECT_TRUE(ph.is_final);
    }
  }
  EXPECT_EQ(schedule(0, plan).level, Level::pcu);
  EXPECT_EQ(schedule(49, plan).level, Level::up4);
  EXPECT_EQ(schedule(50, plan).level, Level::final);
  EXPECT_THROW(schedule(-1, plan), InputError);
  EXPECT_THROW(schedule(70, plan), InputError);
}

TEST(Schedule, OtherSchemesStayFinal) {
  const auto e2e = TrainPlan::canonical(Scheme::end_to_end);
  EXPECT_EQ(e2e.total_epochs(), 40);
  EXPECT_EQ(e2e.batch_size, 32);
  EXPECT_EQ(e2e.base_lr, 2e-3);
  EXPECT_FALSE(e2e.split_lr);
  EXPECT_EQ(schedule(39, e2e).level, Level::final);
  EXPECT_THROW(schedule(40, e2e), InputError);
  const auto ft = TrainPlan::canonical(Scheme::finetune);
  EXPECT_EQ(ft.total_epochs(), 35);
  ASSERT_TRUE(ft.split_lr);
  EXPECT_EQ(ft.split_lr->conv, 2e-4);
  EXPECT_EQ(ft.split_lr->capsule, 2e-3);
}

TEST(Optimizer, FinetuneGroupsPartitionActiveParameters) {
  TucanNet net(toy_config());
  const auto plan = TrainPlan::canonical(Scheme::finetune);
  const auto groups = optimizer_groups(net, plan, Level::final);
  ASSERT_EQ(groups.size(), 3u);
  std::set<const Parameter*> seen;
  for (const auto& g : groups)
    for (const auto* p : g.params) {
      EXPECT_TRUE(seen.insert(p).second) << p->name;
      const bool caps = p->stage == Stage::pcd || p->stage == Stage::pcu;
      const bool head = p->stage == Stage::head || p->stage == Stage::temp_head;
      if (caps) {
        EXPECT_EQ(g.name, "capsule") << p->name;
        EXPECT_EQ(g.lr, 2e-3);
      } else if (head) {
        EXPECT_EQ(g.name, "head") << p->name;
      } else {
        EXPECT_EQ(g.name, "conv") << p->name;
        EXPECT_EQ(g.lr, 2e-4);
      }
    }
  EXPECT_EQ(seen.size(), net.active_parameters(Level::final).size());
  const auto single = optimizer_groups(net, TrainPlan::canonical(Scheme::end_to_end), Level::final);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].lr, 2e-3);
}

TEST(Optimizer, EqualGradientsMoveByGroupLearningRate) {
  TucanNet net(toy_config());
  const auto plan = TrainPlan::canonical(Scheme::finetune);
  std::map<const Parameter*, std::vector<double>> before;
  for (auto* p : net.parameters()) {
    before[p] = p->value;
    std::fill(p->grad.begin(), p->grad.end(), 0.5);
  }
  Adam adam(optimizer_groups(net, plan, Level::final), plan.adam);
  adam.step();
  for (auto* p : net.parameters()) {
    const double lr = adam.group_of(p)->lr;
    for (std::size_t i = 0; i < p->size(); i += 97) EXPECT_NEAR(before[p][i] - p->value[i], lr, lr * 1e-6) << p->name;
  }
}

TEST(Growth, HeadSwapKeepsBackboneAndReportsChecksums) {
  LogCapture quiet;
  auto data = toy_data(2);
  TucanNet net(toy_config());
  auto plan = small_plan(Scheme::progressive);
  plan.levels = {Level::pcu, Level::up1, Level::up2};
  plan.xi = 1;
  const auto res = train_progressive(net, data, bins(), plan);
  ASSERT_EQ(res.epochs.size(), 4u);
  EXPECT_EQ(res.epochs[0].level, Level::pcu);
  EXPECT_EQ(res.epochs[3].level, Level::final);
  ASSERT_EQ(res.growth.size(), 4u);
  EXPECT_EQ(res.growth[0].from, "final");
  EXPECT_EQ(res.growth[0].to, "PCU");
  EXPECT_EQ(res.growth[3].to, "final");
  for (const auto& g : res.growth) EXPECT_EQ(g.checksum_before, g.checksum_after) << g.from << "->" << g.to;
  EXPECT_FALSE(net.temp_level());
  for (const auto& e : res.epochs) EXPECT_TRUE(std::isfinite(e.loss));
  EXPECT_THROW(train_end_to_end(net, data, bins(), plan), InputError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  LogCapture quiet;
  TempDir dir("ckpt");
  auto data = toy_data(2);
  TucanNet net(toy_config());
  auto plan = small_plan(Scheme::progressive);
  TrainOptions opt;
  opt.out_dir = dir.path();
  opt.stop_epoch = 2;
  train(net, data, bins(), plan, opt);
  ASSERT_TRUE(fs::exists(dir / "last.ckpt"));
  ASSERT_TRUE(fs::exists(dir / "manifest.json"));

  const auto info = read_checkpoint_info(dir / "last.ckpt");
  EXPECT_EQ(info.epoch, 2);
  EXPECT_EQ(info.level, Level::up1);
  EXPECT_EQ(info.config_fingerprint, config_fingerprint(net.config()));
  EXPECT_EQ(info.plan.at("rho"), 1);

  auto restored = restore_model(dir / "last.ckpt");
  EXPECT_EQ(restored.net->temp_level(), Level::up1);
  EXPECT_EQ(bin_table_text(restored.bins), bin_table_text(bins()));
  expect_same_state(net, *restored.net);
  Tensor L(1, 1, 64, 64);
  std::copy(data[0].L.begin(), data[0].L.end(), L.data());
  EXPECT_EQ(net.forward(L, Mode::eval).ab_hat, restored.net->forward(L, Mode::eval).ab_hat);
}

TEST(Checkpoint, RefusesMismatchedOrDamagedFiles) {
  TempDir dir("tamper");
  TucanNet net(toy_config());
  save_checkpoint(dir / "a.ckpt", net, bins(), 0);

  BinTable reweighted = bins();
  std::vector<double> w(reweighted.size(), 2.0), prior(reweighted.size(), 1.0 / reweighted.size());
  reweighted.set_rebalance(prior, w);
  try {
    load_checkpoint(dir / "a.ckpt", net, reweighted);
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("bin-table fingerprint"), std::string::npos) << e.what();
  }
  auto other_cfg = toy_config();
  other_cfg.capsules.iterations = 2;
  TucanNet other(other_cfg);
  try {
    load_checkpoint(dir / "a.ckpt", other, bins());
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("config fingerprint"), std::string::npos) << e.what();
  }

  std::string bytes;
  {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad_magic;
  EXPECT_THROW(load_checkpoint(dir / "magic.ckpt", net, bins()), ArtifactError);
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 100);
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt", net, bins()), ArtifactError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt", net, bins()), ArtifactError);
  EXPECT_NO_THROW(load_checkpoint(dir / "a.ckpt", net, bins()));
}

TEST(Resume, ContinuesBitIdenticallyIntoFinalStage) {
  LogCapture quiet;
  TempDir dir("resume");
  auto data = toy_data(3);
  auto plan = small_plan(Scheme::progressive);
  plan.levels = {Level::pcu, Level::up1};
  plan.xi = 2;
  plan.checkpoint_every = 1;

  TucanNet straight(toy_config());
  train(straight, data, bins(), plan);

  TucanNet first(toy_config());
  TrainOptions part;
  part.out_dir = dir.path();
  part.stop_epoch = 2;
  train(first, data, bins(), plan, part);
  EXPECT_TRUE(fs::exists(dir / "epoch_0001.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "epoch_0002.ckpt"));

  TucanNet resumed(toy_config());
  const auto info = load_checkpoint(dir / "last.ckpt", resumed, bins());
  EXPECT_EQ(info.epoch, 2);
  EXPECT_EQ(schedule(info.epoch, plan).level, Level::final);
  TrainOptions rest;
  rest.start_epoch = info.epoch;
  const auto res = train(resumed, data, bins(), plan, rest);
  ASSERT_EQ(res.epochs.size(), 2u);
  EXPECT_EQ(res.epochs[0].level, Level::final);
  ASSERT_EQ(res.growth.size(), 1u);
  EXPECT_EQ(res.growth[0].from, "1stUP");
  expect_same_state(straight, resumed);

  EXPECT_EQ(schedule(50, TrainPlan::canonical(Scheme::progressive)).level, Level::final);
}

TEST(Training, DeterministicForFixedSeed) {
  LogCapture quiet;
  auto data = toy_data(3);
  const auto plan = small_plan(Scheme::end_to_end);
  TucanNet a(toy_config()), b(toy_config());
  const auto ra = train_end_to_end(a, data, bins(), plan);
  const auto rb = train_end_to_end(b, data, bins(), plan);
  EXPECT_EQ(ra.epochs[0].loss, rb.epochs[0].loss);
  EXPECT_EQ(ra.epochs[0].steps, 2u);
  EXPECT_EQ(a.backbone_checksum(), b.backbone_checksum());
}

TEST(Finetune, LoadsCheckpointAndUsesSplitRates) {
  LogCapture quiet;
  TempDir dir("finetune");
  auto data = toy_data(2);
  TucanNet base(toy_config());
  auto plan = small_plan(Scheme::progressive);
  plan.levels = {Level::pcu};
  plan.xi = 0;
  TrainOptions opt;
  opt.out_dir = dir / "base";
  train(base, data, bins(), plan, opt);
  EXPECT_EQ(read_checkpoint_info(dir / "base" / "last.ckpt").level, Level::pcu);

  TucanNet net(toy_config());
  const auto ft = small_plan(Scheme::finetune);
  EXPECT_THROW(finetune(net, data, bins(), ft, dir / "nope.ckpt"), ArtifactError);
  EXPECT_THROW(finetune(net, data, bins(), small_plan(Scheme::end_to_end), dir / "base" / "last.ckpt"), InputError);
  const auto res = finetune(net, data, bins(), ft, dir / "base" / "last.ckpt");
  ASSERT_EQ(res.epochs.size(), 1u);
  EXPECT_EQ(res.epochs[0].level, Level::final);
  EXPECT_FALSE(net.temp_level());
  EXPECT_EQ(res.manifest.at("plan").at("split_lr").at("capsule"), 2e-3);
}

TEST(Training, NonFiniteLossStopsWithDiagnostic) {
  LogCapture quiet;
  TempDir dir("nan");
  auto data = toy_data(2);
  TucanNet net(toy_config());
  for (auto* p : net.parameters())
    if (p->name == "head.chroma.weight") p->value[3] = std::numeric_limits<double>::infinity();
  TrainOptions opt;
  opt.out_dir = dir.path();
  EXPECT_THROW(train(net, data, bins(), small_plan(Scheme::end_to_end), opt), NumericError);
  ASSERT_TRUE(fs::exists(dir / "diagnostic.ckpt"));
  EXPECT_EQ(read_checkpoint_info(dir / "diagnostic.ckpt").extra.at("reason"), "non-finite loss");
}

TEST(Training, RejectsNonFiniteInput) {
  LogCapture quiet;
  auto data = toy_data(2);
  data[1].L[7] = std::numeric_limits<double>::quiet_NaN();
  TucanNet net(toy_config());
  EXPECT_THROW(train(net, data, bins(), small_plan(Scheme::end_to_end)), InputError);
}
