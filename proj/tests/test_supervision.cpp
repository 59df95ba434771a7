#include <gtest/gtest.h>

#include <cmath>

#include "clipbench/oracles.hpp"
#include "clipbench/verify.hpp"

using namespace clipbench;

namespace {

struct FaultReset {
  ~FaultReset() { faults() = FaultHooks{}; }
};

EmbeddingBatch pooled_only(const Tensor& t) {
  EmbeddingBatch e;
  e.pooled = t;
  return e;
}

}  // namespace

TEST(InfoNce, OrthonormalPairsClosedForm) {
  // Two orthonormal pairs: each row sees logit 1/τ on its positive and 0 on the negative.
  Tensor a({2, 2}, {1, 0, 0, 1});
  for (double tau : {0.05, 0.07, 0.5, 1.0}) {
    const double want = std::log1p(std::exp(-1.0 / tau));
    EXPECT_NEAR(info_nce(a, a, tau).item(), want, 1e-12);
  }
}

TEST(InfoNce, IdenticalEmbeddingsGiveLogN) {
  for (std::size_t n : {1u, 2u, 5u, 9u}) {
    std::vector<double> v(n * 3, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * 3] = 1.0;
    Tensor t({n, 3}, v);
    EXPECT_NEAR(info_nce(t, t, 0.07).item(), std::log(static_cast<double>(n)), 1e-12);
  }
}

TEST(InfoNce, MatchesOracleProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(6), d = 2 + rng.index(6);
    const double tau = rng.uniform(0.01, 1.0);
    const auto l = random_unit_rows(rng, n, d), r = random_unit_rows(rng, n, d);
    const Tensor L({n, d}, l), R({n, d}, r);
    EXPECT_NEAR(info_nce(L, R, tau).item(), oracle::info_nce(l, r, n, d, tau), 1e-10);
    const auto t = symmetric_info_nce(L, R, Tensor::scalar(tau));
    EXPECT_NEAR(t.loss.item(), oracle::clip_loss(l, r, n, d, tau), 1e-10);
  }
}

TEST(InfoNce, RejectsBadInputs) {
  Tensor u({2, 2}, {1, 0, 0, 1});
  EXPECT_THROW(info_nce(u, u, 0.0), ContractError);
  EXPECT_THROW(info_nce(u, Tensor({1, 2}, {1, 0}), 0.1), ContractError);
  EXPECT_THROW(info_nce(Tensor({2, 2}, {2, 0, 0, 1}), u, 0.1), ContractError);
}

TEST(ClipLoss, BreakdownHasBothSides) {
  Rng rng(12);
  const auto img = pooled_only(unit_rows(rng, 4, 5)), txt = pooled_only(unit_rows(rng, 4, 5));
  const auto b = clip_loss(img, txt, Tensor::scalar(0.07));
  EXPECT_NEAR(b.term("L_CLIP"), 0.5 * (b.term("L_I") + b.term("L_T")), 1e-14);
  EXPECT_NEAR(b.reconstruct(), b.total.item(), 1e-14);
}

TEST(Iss, MatchesOracleProperty) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(6), d = 2 + rng.index(5);
    const double tau = rng.uniform(0.05, 1.0);
    const auto a = random_unit_rows(rng, n, d), b = random_unit_rows(rng, n, d);
    EXPECT_NEAR(iss_loss(Tensor({n, d}, a), Tensor({n, d}, b), tau).item(), oracle::iss(a, b, n, d, tau), 1e-10);
  }
}

TEST(Iss, SingleSampleIsZero) {
  // One pair: the only candidate besides itself is the positive.
  Tensor a({1, 2}, {1, 0}), b({1, 2}, {0, 1});
  EXPECT_NEAR(iss_loss(a, b, 0.1).item(), 0.0, 1e-15);
}

TEST(Filip, SingleTokenEqualsClip) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(5), d = 3;
    const Tensor i = unit_rows(rng, n, d), t = unit_rows(rng, n, d);
    EmbeddingBatch img, txt;
    img.pooled = i;
    img.tokens = reshape(i, {n, 1, d});
    img.token_mask.assign(n, 1);
    img.token_count.assign(n, 1);
    txt.pooled = t;
    txt.tokens = reshape(t, {n, 1, d});
    txt.token_mask.assign(n, 1);
    txt.token_count.assign(n, 1);
    const auto tau = Tensor::scalar(0.1);
    EXPECT_NEAR(filip_loss(img, txt, tau).total.item(), clip_loss(img, txt, tau).total.item(), 1e-12);
  }
}

TEST(Filip, MatchesOracleProperty) {
  Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(4), t1 = 1 + rng.index(4), t2 = 1 + rng.index(5), d = 2 + rng.index(4);
    const auto img = random_tokens(rng, n, t1, d), txt = random_tokens(rng, n, t2, d);
    const double tau = rng.uniform(0.05, 1.0);
    EXPECT_NEAR(filip_loss(img.batch, txt.batch, Tensor::scalar(tau)).total.item(),
                oracle::filip_loss(img.sets, txt.sets, tau), 1e-10);
  }
}

TEST(Filip, TiesPickLowestIndex) {
  // Image token 0 is equally similar to text tokens 0 and 2.
  std::vector<double> sim{0.5, 0.1, 0.5, 0.2, 0.9, 0.9};
  std::vector<std::uint8_t> m1{1, 1}, m2{1, 1, 1};
  EXPECT_EQ(token_matches(sim, 2, 3, m1, m2, MatchDirection::ImageToText), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(token_matches(sim, 2, 3, m1, m2, MatchDirection::TextToImage), (std::vector<std::size_t>{0, 1, 1}));
  m2[0] = 0;
  EXPECT_EQ(token_matches(sim, 2, 3, m1, m2, MatchDirection::ImageToText), (std::vector<std::size_t>{2, 1}));
}

TEST(Filip, TieGradientGoesToLowestIndexOnly) {
  Tensor img({1, 2}, {1.0, 0.0}, true);
  Tensor txt({2, 2}, {0.6, 0.8, 0.6, -0.8}, true);
  const auto s = filip_similarity(img, {1}, txt, {1, 1});
  EXPECT_NEAR(s.image_side.item(), 0.6, 1e-15);
  backward(s.image_side);
  const auto g = txt.grad();
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[2], 0.0);
}

TEST(Filip, TiebreakFaultChangesMatch) {
  FaultReset reset;
  std::vector<double> sim{0.5, 0.5};
  std::vector<std::uint8_t> m1{1}, m2{1, 1};
  faults().filip_tiebreak = true;
  EXPECT_EQ(token_matches(sim, 1, 2, m1, m2, MatchDirection::ImageToText)[0], 1u);
}

TEST(Filip, AllMaskedSampleThrows) {
  Tensor img({1, 2}, {1, 0}), txt({1, 2}, {0, 1});
  EXPECT_THROW(filip_similarity(img, {0}, txt, {1}), DegenerateInputError);
}

TEST(Filip, TokenFractionKeepsAtLeastOne) {
  const std::vector<double> scores{0.1, 0.9, 0.9, 0.3};
  EXPECT_EQ(select_topk_tokens(scores, 0.5), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_topk_tokens(scores, 0.01), (std::vector<std::size_t>{1}));
}

TEST(Mvs, MatchesOracleAndFixture) {
  Rng rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(5), d = 2 + rng.index(4);
    const auto i = random_unit_rows(rng, n, d), ia = random_unit_rows(rng, n, d), t = random_unit_rows(rng, n, d),
               ta = random_unit_rows(rng, n, d);
    const double got =
        mvs_loss(Tensor({n, d}, i), Tensor({n, d}, ia), Tensor({n, d}, t), Tensor({n, d}, ta), Tensor::scalar(0.2))
            .item();
    EXPECT_NEAR(got, oracle::mvs(i, ia, t, ta, n, d, 0.2), 1e-10);
  }
  // Identical views collapse to plain CLIP.
  const Tensor u({2, 2}, {1, 0, 0, 1});
  EXPECT_NEAR(mvs_loss(u, u, u, u, Tensor::scalar(0.1)).item(), std::log1p(std::exp(-10.0)), 1e-12);
}

TEST(NnQueue, FifoEvictionMatchesModelProperty) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t cap = 1 + rng.index(8), d = 3;
    NNQueue q(cap, d);
    std::vector<oracle::QueueEntry> pushes;
    const std::size_t steps = rng.index(6);
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t rows = 1 + rng.index(4);
      const auto v = random_unit_rows(rng, rows, d);
      q.push(v, s);
      for (std::size_t r = 0; r < rows; ++r)
        pushes.push_back({std::vector<double>(v.begin() + static_cast<long>(r * d), v.begin() + static_cast<long>((r + 1) * d)), s});
    }
    const auto want = oracle::fifo(pushes, cap);
    ASSERT_EQ(q.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      EXPECT_EQ(q.entries()[i].vector, want[i].vector);
      EXPECT_EQ(q.entries()[i].step, want[i].step);
    }
  }
}

TEST(NnQueue, NearestSkipsCurrentStepAndPrefersOlderOnTies) {
  NNQueue q(4, 2);
  q.push(std::vector<double>{1, 0, 1, 0}, 1);
  q.push(std::vector<double>{0, 1}, 2);
  const std::vector<double> query{1, 0};
  EXPECT_EQ(q.nearest(query, 3), std::optional<std::size_t>(0));
  EXPECT_EQ(q.nearest(query, 1), std::optional<std::size_t>(2));
  NNQueue only_current(2, 2);
  only_current.push(std::vector<double>{1, 0}, 5);
  EXPECT_FALSE(only_current.nearest(query, 5).has_value());
}

TEST(NnQueue, RejectsNonUnitVectors) {
  NNQueue q(2, 2);
  EXPECT_THROW(q.push(std::vector<double>{2, 0}, 0), ContractError);
  EXPECT_THROW(NNQueue(0, 2), ConfigError);
}

TEST(Nns, EmptyQueueIsSkippedWithZeroLoss) {
  NNQueue q(4, 2);
  const Tensor u({2, 2}, {1, 0, 0, 1});
  const auto r = nns_loss(u, u, q, Tensor::scalar(0.1), 0);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.loss.item(), 0.0);
}

TEST(Nns, MatchesOracleProperty) {
  Rng rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(4), d = 3, cap = 1 + rng.index(10);
    NNQueue q(cap, d);
    std::deque<oracle::QueueEntry> model;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto v = random_unit_rows(rng, 2, d);
      q.push(v, s);
    }
    for (const auto& e : q.entries()) model.push_back({e.vector, e.step});
    const auto i = random_unit_rows(rng, n, d), t = random_unit_rows(rng, n, d);
    const std::uint64_t step = rng.index(4);
    EXPECT_NEAR(nns_loss(Tensor({n, d}, i), Tensor({n, d}, t), q, Tensor::scalar(0.1), step).loss.item(),
                oracle::nns(i, t, n, d, model, 0.1, step), 1e-10);
  }
}

TEST(Mlm, MasksFifteenPercentAtLeastOne) {
  TokenBatch tb;
  tb.batch = 2;
  tb.length = 24;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 24; ++i) {
      const std::size_t len = n == 0 ? 22 : 4;  // 20 and 2 words
      int id = special::kPad;
      if (i == 0) id = special::kStart;
      else if (i + 1 < len) id = 10;
      else if (i + 1 == len) id = special::kEnd;
      tb.ids.push_back(id);
      tb.valid.push_back(i < len);
    }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = mask_for_mlm(tb, 50, seed);
    std::size_t first = 0, second = 0;
    for (auto p : m.positions) {
      ASSERT_TRUE(tb.is_word(p / 24, p % 24));
      (p < 24 ? first : second)++;
    }
    EXPECT_EQ(first, 3u);
    EXPECT_EQ(second, 1u);
    for (std::size_t k = 0; k < m.positions.size(); ++k) EXPECT_EQ(m.targets[k], 10u);
  }
}

TEST(Mlm, SequenceWithoutWordsIsSkipped) {
  TokenBatch tb{1, 3, {special::kStart, special::kEnd, special::kPad}, {1, 1, 0}};
  const auto m = mask_for_mlm(tb, 20, 1);
  EXPECT_TRUE(m.positions.empty());
  EXPECT_EQ(m.skipped_sequences, 1u);
}

TEST(LossConfig, PresetsAndValidation) {
  const auto d = LossConfig::preset(Variant::Defilip);
  EXPECT_TRUE(d.use_clip && d.use_iss && d.use_tss && d.use_mvs && d.use_nns && d.use_fas);
  const auto f = LossConfig::preset(Variant::Filip);
  EXPECT_FALSE(f.use_clip);
  EXPECT_TRUE(f.use_fas);
  LossConfig bad = LossConfig::preset(Variant::Declip);
  bad.alpha = bad.beta = bad.gamma = 0.4;
  EXPECT_THROW(bad.validate(Variant::Declip), ConfigError);
  EXPECT_NO_THROW(bad.validate(Variant::Clip));
  EXPECT_EQ(parse_variant("defilip"), Variant::Defilip);
  EXPECT_FALSE(parse_variant("DeCLIP++").has_value());
}

TEST(Composition, ReconstructionAndDifferenceIdentities) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    FullStackFixture fx(seed);
    for (auto v : {Variant::Clip, Variant::Slip, Variant::Filip, Variant::Declip, Variant::Defilip}) {
      const auto b = fx.loss(v);
      EXPECT_NEAR(b.reconstruct(), b.total.item(), 1e-12) << to_string(v);
    }
    const auto de = fx.loss(Variant::Declip), df = fx.loss(Variant::Defilip);
    EXPECT_NEAR(df.total.item() - de.total.item(), fx.loss_config.lambda * df.term("L_FAS"), 1e-12);
  }
}

TEST(Composition, ZeroWeightsCollapseToClip) {
  FullStackFixture fx(4);
  const double clip = fx.loss(Variant::Clip).total.item();
  fx.loss_config.alpha = fx.loss_config.beta = fx.loss_config.gamma = fx.loss_config.lambda = 0.0;
  fx.loss_config.alpha_slip = 0.0;
  for (auto v : {Variant::Slip, Variant::Declip, Variant::Defilip}) EXPECT_EQ(fx.loss(v).total.item(), clip);
}

TEST(Composition, MissingInputsThrow) {
  Rng rng(19);
  const auto img = pooled_only(unit_rows(rng, 2, 3)), txt = pooled_only(unit_rows(rng, 2, 3));
  SupervisionInputs in;
  in.image = &img;
  in.text = &txt;
  in.temperature = Tensor::scalar(0.07);
  EXPECT_NO_THROW(compute_loss(Variant::Clip, in, LossConfig::preset(Variant::Clip)));
  EXPECT_THROW(compute_loss(Variant::Slip, in, LossConfig::preset(Variant::Slip)), ContractError);
  EXPECT_THROW(compute_loss(Variant::Declip, in, LossConfig::preset(Variant::Declip)), ContractError);
}

TEST(Composition, VariantNeeds) {
  EXPECT_FALSE(needs_of(Variant::Clip).image_views);
  EXPECT_TRUE(needs_of(Variant::Slip).image_views);
  EXPECT_FALSE(needs_of(Variant::Slip).queue);
  EXPECT_TRUE(needs_of(Variant::Defilip).tss);
}

TEST(VerifyChecks, AllPassWithoutFaults) {
  for (const auto& c : all_checks()) {
    const auto r = c.run();
    EXPECT_TRUE(r.passed) << c.name << ": " << r.detail;
  }
}

TEST(VerifyChecks, EachFaultIsDetected) {
  FaultReset reset;
  auto failing = [] {
    std::vector<std::string> names;
    for (const auto& c : all_checks())
      if (!c.run().passed) names.push_back(c.name);
    return names;
  };
  auto contains = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  faults() = FaultHooks{};
  faults().filip_tiebreak = true;
  EXPECT_TRUE(contains(failing(), "loss.filip"));
  faults() = FaultHooks{};
  faults().matmul_grad = true;
  EXPECT_TRUE(contains(failing(), "autograd.matmul"));
  faults() = FaultHooks{};
  faults().info_nce_transpose = true;
  EXPECT_TRUE(contains(failing(), "loss.info_nce"));
  faults() = FaultHooks{};
  faults().queue_fifo = true;
  EXPECT_TRUE(contains(failing(), "loss.nns"));
}
