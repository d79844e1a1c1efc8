#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mcpnet/trainer.hpp"

using namespace mcpnet;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.channels = {3, 4, 8};
  a.head_hidden = 16;
  a.proj_dim = 8;
  return a;
}

const DatasetStore& tiny_corpus() {
  static const DatasetStore store = generate_synthetic_dataset(4, 4, 48, 16, 21);
  return store;
}

TrainConfig tiny_config(BranchMode mode = BranchMode::Joint) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 2;
  c.clip_length = 8;
  c.seed = 5;
  c.branch_mode = mode;
  return c;
}

std::map<std::string, Tensor<float>> with_prefix(const ParameterStore<float>& s, const std::string& prefix) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [k, v] : s.params)
    if (k.starts_with(prefix)) out.emplace(k, v);
  return out;
}

}  // namespace

TEST(LrSchedule, LinearBatchScaling) {
  EXPECT_EQ(lr_schedule(0.1, 32), 0.1);
  EXPECT_EQ(lr_schedule(0.1, 28), 0.0875);
  EXPECT_EQ(lr_schedule(0.1, 256), 0.8);
  EXPECT_THROW(lr_schedule(0.1, 0), std::invalid_argument);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.loss.alpha = 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainConfig, EffectiveValues) {
  TrainConfig c;
  EXPECT_EQ(c.effective_alpha(), 0.5);
  c.branch_mode = BranchMode::MipOnly;
  EXPECT_EQ(c.effective_alpha(), 1.0);
  c.branch_mode = BranchMode::CipOnly;
  EXPECT_EQ(c.effective_alpha(), 0.0);
  EXPECT_EQ(c.effective_t(), 4);
  c.view_mode = ViewMode::Residual;
  EXPECT_EQ(c.effective_t(), 1);
}

TEST(SgdStep, ZeroGradientLeavesParamsUnchanged) {
  std::map<std::string, Tensor<float>> p{{"w", Tensor<float>(Shape{3}, std::vector<float>{1, -2, 3})}};
  const auto before = p;
  Velocity<float> v;
  sgd_step(p, v, Gradients<float>{{"w", Tensor<float>(Shape{3})}}, 0.1, 0.9, 0.0);
  EXPECT_TRUE(p == before);
}

TEST(SgdStep, SingleScalarStep) {
  std::map<std::string, Tensor<double>> p{{"w", Tensor<double>::scalar(1.0)}};
  Velocity<double> v;
  sgd_step(p, v, Gradients<double>{{"w", Tensor<double>::scalar(0.5)}}, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p["w"].item(), 0.95);
}

TEST(SgdStep, MomentumMatchesHandIteration) {
  std::map<std::string, Tensor<double>> p{{"w", Tensor<double>::scalar(0.0)}};
  Velocity<double> v;
  // v1 = 1, step 0.1; v2 = 0.9 * 1 + 1 = 1.9, step 0.19.
  double vel = 0, param = 0;
  for (double expect_drop : {0.1, 0.19}) {
    const double before = p["w"].item();
    sgd_step(p, v, Gradients<double>{{"w", Tensor<double>::scalar(1.0)}}, 0.1, 0.9, 0.0);
    vel = 0.9 * vel + 1.0;
    param -= 0.1 * vel;
    EXPECT_NEAR(before - p["w"].item(), expect_drop, 1e-15);
    EXPECT_DOUBLE_EQ(p["w"].item(), param);
  }
}

TEST(SgdStep, WeightDecayOnlyTouchesParamsWithGradients) {
  std::map<std::string, Tensor<double>> p{{"a", Tensor<double>::scalar(2.0)}, {"b", Tensor<double>::scalar(2.0)}};
  Velocity<double> v;
  sgd_step(p, v, Gradients<double>{{"a", Tensor<double>::scalar(0.0)}}, 0.5, 0.0, 0.1);
  EXPECT_DOUBLE_EQ(p["a"].item(), 2.0 - 0.5 * 0.2);
  EXPECT_EQ(p["b"].item(), 2.0);
}

TEST(SgdStep, NonFiniteGradientAbortsWholeStep) {
  std::map<std::string, Tensor<double>> p{{"a", Tensor<double>::scalar(1.0)}, {"b", Tensor<double>::scalar(1.0)}};
  const auto before = p;
  Velocity<double> v;
  Gradients<double> g{{"a", Tensor<double>::scalar(1.0)}, {"b", Tensor<double>::scalar(std::nan(""))}};
  try {
    sgd_step(p, v, g, 0.1, 0.9, 0.0);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "b");
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_TRUE(p == before);
}

TEST(MakeBatch, DistinctVideosAndFullEpochCoverage) {
  const auto& data = tiny_corpus();
  TrainConfig c = tiny_config();
  std::multiset<std::uint32_t> seen;
  for (std::size_t step = 0; step < steps_per_epoch(data.size(), c.batch_size); ++step) {
    Batch b = make_batch(data, c, 0, step);
    ASSERT_EQ(b.video_ids.size(), c.batch_size);
    ASSERT_EQ(b.mip.size(), c.batch_size);
    ASSERT_EQ(b.cip.size(), c.batch_size);
    EXPECT_EQ(std::set<std::uint32_t>(b.video_ids.begin(), b.video_ids.end()).size(), c.batch_size);
    seen.insert(b.video_ids.begin(), b.video_ids.end());
  }
  EXPECT_EQ(seen.size(), data.size());
  EXPECT_EQ(std::set<std::uint32_t>(seen.begin(), seen.end()).size(), data.size());
}

TEST(MakeBatch, DeterministicPerSeedEpochStep) {
  const auto& data = tiny_corpus();
  TrainConfig c = tiny_config();
  Batch a = make_batch(data, c, 1, 2), b = make_batch(data, c, 1, 2);
  ASSERT_EQ(a.video_ids, b.video_ids);
  for (std::size_t i = 0; i < a.mip.size(); ++i) {
    EXPECT_TRUE(a.mip[i].rgb.data == b.mip[i].rgb.data);
    EXPECT_TRUE(a.mip[i].lres_diff.data == b.mip[i].lres_diff.data);
    EXPECT_TRUE(a.cip[i].lres.data == b.cip[i].lres.data);
  }
  Batch other = make_batch(data, c, 2, 2);
  EXPECT_FALSE(other.video_ids == a.video_ids && other.mip[0].rgb.data == a.mip[0].rgb.data);
}

TEST(MakeBatch, HonoursSpeedAndBranchModes) {
  const auto& data = tiny_corpus();
  TrainConfig c = tiny_config();
  c.cip_speed_mode = CipSpeedMode::Same;
  for (const CipPair& p : make_batch(data, c, 0, 0).cip) EXPECT_EQ(p.rgb.speed, p.lres.speed);
  c.cip_speed_mode = CipSpeedMode::Different;
  for (const CipPair& p : make_batch(data, c, 0, 0).cip) EXPECT_NE(p.rgb.speed, p.lres.speed);
  for (const MipTriplet& m : make_batch(data, c, 0, 0).mip) {
    EXPECT_EQ(m.rgb.speed, m.lres_same.speed);
    EXPECT_NE(m.rgb.speed, m.lres_diff.speed);
    EXPECT_EQ(m.lres_same.view, ViewKind::LongRes);
  }
  c.branch_mode = BranchMode::MipOnly;
  EXPECT_TRUE(make_batch(data, c, 0, 0).cip.empty());
  c.branch_mode = BranchMode::CipOnly;
  EXPECT_TRUE(make_batch(data, c, 0, 0).mip.empty());
}

TEST(MakeBatch, DatasetSmallerThanBatchRejected) {
  TrainConfig c = tiny_config();
  c.batch_size = 32;
  EXPECT_THROW(make_batch(tiny_corpus(), c, 0, 0), std::invalid_argument);
}

TEST(TrainStep, LossBookkeepingIdentity) {
  const ArchConfig arch = tiny_arch();
  for (BranchMode mode : {BranchMode::Joint, BranchMode::MipOnly, BranchMode::CipOnly}) {
    TrainConfig c = tiny_config(mode);
    auto store = init_params<float>(1, arch);
    Velocity<float> v;
    for (std::size_t step = 0; step < 3; ++step) {
      StepResult r = train_step(store, v, make_batch(tiny_corpus(), c, 0, step), c, arch);
      const double a = c.effective_alpha();
      EXPECT_NEAR(r.loss.total, a * r.loss.mip + (1 - a) * r.loss.cip, 1e-6);
      EXPECT_GE(r.loss.mip, 0.0);
      EXPECT_GE(r.loss.cip, 0.0);
      if (mode == BranchMode::MipOnly) EXPECT_EQ(r.loss.cip, 0.0);
      if (mode == BranchMode::CipOnly) EXPECT_EQ(r.loss.mip, 0.0);
    }
  }
}

TEST(Pretrain, BranchIsolation) {
  const ArchConfig arch = tiny_arch();
  TrainConfig c = tiny_config(BranchMode::MipOnly);
  const auto init = init_params<float>(derive_seed(c.seed, "init"), arch);
  Checkpoint mip = pretrain(tiny_corpus(), c, arch);
  EXPECT_TRUE(with_prefix(mip.store, "cip.") == with_prefix(init, "cip."));
  EXPECT_FALSE(with_prefix(mip.store, "mip.") == with_prefix(init, "mip."));
  EXPECT_FALSE(with_prefix(mip.store, "enc.") == with_prefix(init, "enc."));
  for (const auto& h : mip.history) EXPECT_EQ(h.cip, 0.0);

  c.branch_mode = BranchMode::CipOnly;
  Checkpoint cip = pretrain(tiny_corpus(), c, arch);
  EXPECT_TRUE(with_prefix(cip.store, "mip.") == with_prefix(init, "mip."));
  EXPECT_FALSE(with_prefix(cip.store, "cip.") == with_prefix(init, "cip."));
  EXPECT_FALSE(with_prefix(cip.store, "enc.") == with_prefix(init, "enc."));
}

TEST(Pretrain, DeterministicHistoriesAndMetrics) {
  const ArchConfig arch = tiny_arch();
  TrainConfig c = tiny_config();
  std::ostringstream m1, m2;
  PretrainOptions o1, o2;
  o1.metrics = &m1;
  o2.metrics = &m2;
  Checkpoint a = pretrain(tiny_corpus(), c, arch, o1);
  Checkpoint b = pretrain(tiny_corpus(), c, arch, o2);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(m1.str(), m2.str());
  EXPECT_TRUE(a.store == b.store);
  EXPECT_EQ(a.epoch, 2u);
  EXPECT_EQ(a.fingerprint, fingerprint(c.describe()));
}

TEST(Pretrain, MetricsCsvFormat) {
  const ArchConfig arch = tiny_arch();
  TrainConfig c = tiny_config(BranchMode::MipOnly);
  c.epochs = 1;
  std::ostringstream m;
  PretrainOptions o;
  o.metrics = &m;
  pretrain(tiny_corpus(), c, arch, o);
  std::istringstream in(m.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,step,mip_loss,cip_loss,total_loss,lr");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell[6];
    for (auto& x : cell) std::getline(row, x, ',');
    EXPECT_EQ(cell[0], "0");
    EXPECT_EQ(cell[1], std::to_string(rows));
    EXPECT_EQ(cell[3], "0");
    EXPECT_EQ(cell[2], cell[4]);
    EXPECT_EQ(cell[5], "0.0125");
    ++rows;
  }
  EXPECT_EQ(rows, steps_per_epoch(tiny_corpus().size(), c.batch_size));
  EXPECT_EQ(format_metrics_row(3, 7, {1.234567891, 0.5, 2.0}, 0.05), "3,7,0.5,2,1.23457,0.05\n");
}

TEST(Pretrain, LossDecreases) {
  const ArchConfig arch = tiny_arch();
  TrainConfig c = tiny_config();
  c.epochs = 8;
  Checkpoint ck = pretrain(tiny_corpus(), c, arch);
  EXPECT_LT(ck.history.back().total, ck.history.front().total);
}

TEST(Pretrain, CheckpointFilesRoundTrip) {
  const ArchConfig arch = tiny_arch();
  TrainConfig c = tiny_config();
  c.checkpoint_every = 1;
  const auto dir = std::filesystem::temp_directory_path() / "mcpnet_test_ckpt";
  std::filesystem::remove_all(dir);
  PretrainOptions o;
  o.checkpoint_dir = dir.string();
  Checkpoint ck = pretrain(tiny_corpus(), c, arch, o);
  ASSERT_TRUE(std::filesystem::exists(dir / "epoch1.mcpc"));
  ASSERT_TRUE(std::filesystem::exists(dir / "final.mcpc"));
  Checkpoint loaded = load_full_checkpoint((dir / "final.mcpc").string());
  EXPECT_TRUE(loaded.store == ck.store);
  EXPECT_EQ(loaded.epoch, ck.epoch);
  EXPECT_EQ(loaded.fingerprint, ck.fingerprint);
  EXPECT_EQ(loaded.history, ck.history);
  save_full_checkpoint((dir / "again.mcpc").string(), loaded);
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  EXPECT_EQ(bytes(dir / "final.mcpc"), bytes(dir / "again.mcpc"));
  EXPECT_EQ(bytes(dir / "final.mcpc.meta"), bytes(dir / "again.mcpc.meta"));
  Checkpoint first = load_full_checkpoint((dir / "epoch1.mcpc").string());
  EXPECT_EQ(first.epoch, 1u);
  EXPECT_EQ(first.history.size(), 1u);
  std::filesystem::remove_all(dir);
}

TEST(Pretrain, DivergenceKeepsLastGoodCheckpoint) {
  const ArchConfig arch = tiny_arch();
  TrainConfig c = tiny_config();
  c.epochs = 3;
  c.base_lr = 1e30;
  try {
    pretrain(tiny_corpus(), c, arch);
    FAIL() << "expected divergence";
  } catch (const PretrainDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    EXPECT_TRUE(e.last_good().store.all_finite());
    EXPECT_EQ(e.last_good().history.size(), e.last_good().epoch);
  }
}

TEST(Pretrain, DatasetSmallerThanBatchRejected) {
  TrainConfig c = tiny_config();
  c.batch_size = 64;
  EXPECT_THROW(pretrain(tiny_corpus(), c, tiny_arch()), std::invalid_argument);
}
