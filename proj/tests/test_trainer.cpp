#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "trainer_fixture.hpp"

using namespace clipbench;
using namespace clipbench::testing;

TEST(Schedule, WarmupThenCosine) {
  TrainConfig c;
  c.epochs = 4;
  c.warmup_epochs = 1;
  c.base_lr = 1e-4;
  c.peak_lr = 1e-3;
  const auto s = LrSchedule::from(c, 10);
  EXPECT_EQ(s.warmup_steps, 10u);
  EXPECT_EQ(s.total_steps, 40u);
  EXPECT_DOUBLE_EQ(lr_at(0, s), 1e-4);
  EXPECT_NEAR(lr_at(5, s), 5.5e-4, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(10, s), 1e-3);
  EXPECT_NEAR(lr_at(25, s), 5e-4, 1e-18);
  EXPECT_NEAR(lr_at(39, s), 1e-3 * 0.5 * (1 + std::cos(std::numbers::pi * 29.0 / 30.0)), 1e-18);
  EXPECT_EQ(lr_at(40, s), 0.0);
}

TEST(Schedule, FractionalAndZeroWarmup) {
  TrainConfig c;
  c.epochs = 2;
  c.warmup_epochs = 0.25;
  EXPECT_EQ(LrSchedule::from(c, 7).warmup_steps, 2u);
  c.warmup_epochs = 0;
  const auto s = LrSchedule::from(c, 7);
  EXPECT_DOUBLE_EQ(lr_at(0, s), c.peak_lr);
}

TEST(Schedule, MonotoneDecayPropertyAfterWarmup) {
  Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    TrainConfig c;
    c.epochs = 1 + rng.index(10);
    c.warmup_epochs = rng.uniform(0.0, static_cast<double>(c.epochs));
    const auto s = LrSchedule::from(c, 1 + rng.index(20));
    for (std::size_t t = 0; t + 1 < s.total_steps; ++t) {
      const double a = lr_at(t, s), b = lr_at(t + 1, s);
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, c.peak_lr + 1e-18);
      if (t + 1 < s.warmup_steps) {
        EXPECT_LE(a, b);
      }
      if (t >= s.warmup_steps) {
        EXPECT_GE(a, b);
      }
    }
  }
}

TEST(AdamW, FirstStepMovesBySignedLearningRate) {
  ParameterList params;
  Tensor w({3}, {0.5, -0.2, 1.0}, true);
  params.add("w", w, false);
  backward(sum(mul(w, Tensor({3}, {2.0, -3.0, 0.5}))));
  AdamState st;
  AdamWConfig cfg;
  cfg.eps = 0.0;
  adamw_step(params, st, 0.01, cfg);
  EXPECT_NEAR(w[0], 0.49, 1e-15);
  EXPECT_NEAR(w[1], -0.19, 1e-15);
  EXPECT_NEAR(w[2], 0.99, 1e-15);
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, DecayOnlyOnDecayingParameters) {
  ParameterList params;
  Tensor a({2}, {1.0, -2.0}, true), b({2}, {1.0, -2.0}, true);
  params.add("a", a, true);
  params.add("b", b, false);
  a.zero_grad();
  b.zero_grad();
  AdamState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.5;
  // Zero gradients: Adam contributes nothing, only the decoupled decay acts.
  backward(scale(sum(add(a, b)), 0.0));
  adamw_step(params, st, 0.1, cfg);
  EXPECT_NEAR(a[0], 0.95, 1e-15);
  EXPECT_NEAR(a[1], -1.9, 1e-15);
  EXPECT_EQ(b[0], 1.0);
  EXPECT_EQ(b[1], -2.0);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  ParameterList params;
  Tensor a({1}, {0.0}, true);
  params.add("layer.weight", a, true);
  backward(sum(mul(a, Tensor({1}, {std::numeric_limits<double>::infinity()}))));
  AdamState st;
  try {
    adamw_step(params, st, 0.1, AdamWConfig{});
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
  EXPECT_EQ(a[0], 0.0);
}

TEST(Trainer, ZeroEpochsWritesOnlyInitialCheckpoint) {
  const auto dir = fresh_dir("zero_epochs");
  const auto res = train(tiny_setup(Variant::Clip, dir, 0), tiny_data());
  EXPECT_EQ(res.steps, 0u);
  EXPECT_TRUE(res.epoch_accuracy.empty());
  EXPECT_TRUE(std::filesystem::exists(dir + "/initial.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir + "/final.ckpt"));
  EXPECT_EQ(slurp(dir + "/metrics.log"), "");
}

TEST(Trainer, LogsEveryStepAndEpoch) {
  const auto dir = fresh_dir("log_lines");
  const auto res = train(tiny_setup(Variant::Declip, dir, 2), tiny_data());
  EXPECT_EQ(res.steps, 12u);
  ASSERT_EQ(res.epoch_accuracy.size(), 2u);
  std::istringstream log(slurp(dir + "/metrics.log"));
  std::string line;
  std::size_t steps = 0, epochs = 0;
  while (std::getline(log, line)) {
    if (line.rfind("step=", 0) == 0) {
      ++steps;
      for (const char* term : {"L_CLIP=", "L_ISS=", "L_TSS=", "L_MVS=", "L_NNS=", "total=", "tau="})
        EXPECT_NE(line.find(term), std::string::npos) << line;
    } else if (line.rfind("epoch=", 0) == 0) {
      ++epochs;
    }
  }
  EXPECT_EQ(steps, 12u);
  EXPECT_EQ(epochs, 2u);
  for (const char* f : {"initial.ckpt", "last.ckpt", "best.ckpt", "final.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir + "/" + f)) << f;
  // The queue starts empty, so step 0 finds no neighbours.
  EXPECT_GE(res.nns_skipped, 1u);
}

TEST(Trainer, TemperatureStaysClamped) {
  const auto dir = fresh_dir("tau_clamp");
  auto s = tiny_setup(Variant::Clip, dir, 1);
  s.model.init_temperature = kMinTemperature;
  s.train.peak_lr = 0.5;
  s.train.base_lr = 0.5;
  const auto data = tiny_data();
  Trainer t(s, data);
  t.run();
  EXPECT_GE(t.model().temperature_value(), kMinTemperature * (1 - 1e-12));
  EXPECT_LE(t.model().temperature_value(), kMaxTemperature * (1 + 1e-12));
}

TEST(Trainer, BitwiseDeterministic) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  const auto data = tiny_data();
  train(tiny_setup(Variant::Defilip, a, 2), data);
  train(tiny_setup(Variant::Defilip, b, 2), data);
  EXPECT_EQ(slurp(a + "/metrics.log"), slurp(b + "/metrics.log"));
  EXPECT_EQ(slurp(a + "/final.ckpt"), slurp(b + "/final.ckpt"));
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const auto full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
  const auto data = tiny_data();
  train(tiny_setup(Variant::Declip, full, 3), data);
  auto first = tiny_setup(Variant::Declip, part, 3);
  first.train.stop_after_steps = 7;
  const auto r1 = train(first, data);
  EXPECT_TRUE(r1.stopped_early);
  EXPECT_EQ(r1.steps, 7u);
  auto second = tiny_setup(Variant::Declip, part, 3);
  second.resume_from = part + "/last.ckpt";
  const auto r2 = train(second, data);
  EXPECT_EQ(r2.steps, 18u);
  EXPECT_EQ(slurp(full + "/metrics.log"), slurp(part + "/metrics.log"));
  EXPECT_EQ(slurp(full + "/final.ckpt"), slurp(part + "/final.ckpt"));
}

TEST(Trainer, ResumeRejectsMismatches) {
  const auto dir = fresh_dir("resume_bad");
  const auto data = tiny_data();
  train(tiny_setup(Variant::Clip, dir, 1), data);
  auto other = tiny_setup(Variant::Slip, fresh_dir("resume_bad2"), 1);
  other.resume_from = dir + "/final.ckpt";
  EXPECT_THROW(Trainer(other, data), ArtifactMismatchError);
  auto deeper = tiny_setup(Variant::Clip, fresh_dir("resume_bad3"), 1);
  deeper.model.text.depth = 2;
  deeper.resume_from = dir + "/final.ckpt";
  EXPECT_THROW(Trainer(deeper, data), ArtifactMismatchError);
}

TEST(Trainer, RejectsBadSetups) {
  const auto data = tiny_data();
  auto big = tiny_setup(Variant::Clip, fresh_dir("bad_batch"), 1);
  big.train.batch_size = 100;
  EXPECT_THROW(Trainer(big, data), ConfigError);
  auto bad = data;
  bad.val[0].label = 99;
  EXPECT_THROW(Trainer(tiny_setup(Variant::Clip, fresh_dir("bad_label"), 1), bad), IndexError);
}

TEST(Trainer, ConvFilipWarnsAboutOverlap) {
  auto s = tiny_setup(Variant::Filip, fresh_dir("conv_filip"), 1);
  s.model.image_kind = ImageEncoderKind::Conv;
  s.model.conv.image_size = 8;
  s.model.conv.channels = {8, 8};
  s.model.conv.kernels = {3, 3};
  s.model.conv.pools = {1, 0};
  s.model.conv.embed_dim = 4;
  const auto r = train(s, tiny_data());
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("filip_overlapping_receptive_fields"), std::string::npos);
}
