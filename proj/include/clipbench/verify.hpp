#pragma once

// The oracle suite behind `clipbench verify`: gradient checks, brute-force
// loss equivalence, analytic fixtures and composition identities.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "clipbench/augment.hpp"
#include "clipbench/gradcheck.hpp"
#include "clipbench/oracles.hpp"
#include "clipbench/supervision.hpp"

namespace clipbench {

// ------------------------------------------------------- random instances

inline std::vector<double> random_unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += (v[i * d + k] = rng.normal()) * v[i * d + k];
    const double norm = std::sqrt(ss);
    for (std::size_t k = 0; k < d; ++k) v[i * d + k] /= norm;
  }
  return v;
}

inline Tensor unit_rows(Rng& rng, std::size_t n, std::size_t d) { return Tensor({n, d}, random_unit_rows(rng, n, d)); }

// Token embeddings [n, t, d] with per-sample masks; every sample keeps at
// least one token.
struct RandomTokens {
  EmbeddingBatch batch;
  std::vector<oracle::TokenSet> sets;
};

inline RandomTokens random_tokens(Rng& rng, std::size_t n, std::size_t t, std::size_t d) {
  RandomTokens r;
  auto values = random_unit_rows(rng, n * t, d);
  std::vector<std::uint8_t> mask(n * t);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t keep = 1 + rng.index(t);
    for (std::size_t k = 0; k < t; ++k) mask[i * t + k] = k < keep;
  }
  r.batch.pooled = unit_rows(rng, n, d);
  r.batch.tokens = Tensor({n, t, d}, values);
  r.batch.token_mask = mask;
  r.batch.token_count.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    oracle::TokenSet s;
    for (std::size_t k = 0; k < t; ++k) {
      s.tokens.emplace_back(values.begin() + static_cast<long>((i * t + k) * d),
                            values.begin() + static_cast<long>((i * t + k + 1) * d));
      s.mask.push_back(mask[i * t + k]);
      r.batch.token_count[i] += mask[i * t + k];
    }
    r.sets.push_back(std::move(s));
  }
  return r;
}

// -------------------------------------------------------------- full stack

// A tiny model and a fixed N-sample batch with every input any variant
// consumes. loss(v) rebuilds the whole graph from the current weights.
struct FullStackFixture {
  ModelConfig config;
  std::unique_ptr<ClipModel> model;
  Tensor images, view_a, view_b;
  TokenBatch tokens, tokens_aug;
  MaskedTokens masked;
  NNQueue queue{16, 4};
  LossConfig loss_config;
  std::uint64_t step = 1;

  static ModelConfig tiny_config() {
    ModelConfig m;
    m.vit.image_size = 8;
    m.vit.patch_size = 4;
    m.vit.width = 8;
    m.vit.depth = 1;
    m.vit.heads = 2;
    m.vit.embed_dim = 4;
    m.text.vocab_size = 16;
    m.text.context_length = 6;
    m.text.width = 8;
    m.text.depth = 1;
    m.text.heads = 2;
    m.text.embed_dim = 4;
    return m;
  }

  explicit FullStackFixture(std::uint64_t seed, std::size_t n = 4, ModelConfig cfg = tiny_config())
      : config(cfg), queue(16, cfg.text.embed_dim) {
    model = std::make_unique<ClipModel>(config, seed);
    // Larger weights than the init scale so attention and the heads carry
    // gradients well above finite-difference noise.
    for (auto& p : model->params().items())
      if (p.value.rank() == 2 && p.name.find("weight") != std::string::npos)
        for (auto& v : p.value.mutable_data()) v *= 15.0;
    Rng rng(derive_seed(seed, 0x66697874ULL));
    const std::size_t S = config.image_size();
    auto random_images = [&] {
      std::vector<double> px(n * 3 * S * S);
      for (auto& v : px) v = rng.uniform();
      return Tensor({n, 3, S, S}, px);
    };
    images = random_images();
    view_a = random_images();
    view_b = random_images();
    auto random_tokens = [&] {
      TokenBatch tb;
      tb.batch = n;
      tb.length = config.text.context_length;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = 3 + rng.index(tb.length - 2);
        for (std::size_t k = 0; k < tb.length; ++k) {
          int id = special::kPad;
          if (k == 0) id = special::kStart;
          else if (k + 1 < len) id = static_cast<int>(special::kCount + rng.index(config.text.vocab_size - special::kCount));
          else if (k + 1 == len) id = special::kEnd;
          tb.ids.push_back(id);
          tb.valid.push_back(k < len);
        }
      }
      return tb;
    };
    tokens = random_tokens();
    tokens_aug = random_tokens();
    masked = mask_for_mlm(tokens, config.text.vocab_size, derive_seed(seed, 0x6d6c6dULL));
    queue.push(random_unit_rows(rng, 8, config.text.embed_dim), 0);
  }

  LossBreakdown loss(Variant v) const {
    const EmbeddingBatch img = model->encode_image(images);
    const EmbeddingBatch txt = model->encode_text(tokens);
    const VariantNeeds need = needs_of(v);
    std::optional<EmbeddingBatch> va, vb, ta;
    SupervisionInputs in;
    in.image = &img;
    in.text = &txt;
    in.step = step;
    in.temperature = model->temperature();
    if (need.image_views) {
      va = model->encode_image(view_a);
      vb = model->encode_image(view_b);
      in.image_view_a = &*va;
      in.image_view_b = &*vb;
    }
    if (need.text_aug) {
      ta = model->encode_text(tokens_aug);
      in.text_aug = &*ta;
    }
    if (need.tss) in.tss = tss_loss(masked, model->text_encoder(), model->mlm_head());
    if (need.queue) in.queue = &queue;
    LossConfig cfg = loss_config;
    const LossConfig p = LossConfig::preset(v);
    cfg.use_clip = p.use_clip;
    cfg.use_iss = p.use_iss;
    cfg.use_tss = p.use_tss;
    cfg.use_mvs = p.use_mvs;
    cfg.use_nns = p.use_nns;
    cfg.use_fas = p.use_fas;
    return compute_loss(v, in, cfg);
  }

  GradCheckReport gradcheck(Variant v, double tolerance = 1e-4) const {
    GradCheckOptions opt;
    opt.tolerance = tolerance;
    return check_gradients([&] { return loss(v).total; }, model->params().tensors(), opt);
  }
};

// ------------------------------------------------------------------ checks

struct CheckResult {
  bool passed = true;
  std::string detail;

  void fail(const std::string& why) {
    if (passed) detail = why;
    passed = false;
  }
};

struct Check {
  std::string name;
  std::string description;
  std::function<CheckResult()> run;
};

namespace checks {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

inline CheckResult gradient_report(const GradCheckReport& r, double min_fraction) {
  CheckResult c;
  c.detail = std::to_string(r.passed) + "/" + std::to_string(r.checked) + " within tolerance, max rel err " +
             fmt(r.max_rel_error);
  if (r.pass_fraction() < min_fraction) c.fail(c.detail);
  return c;
}

inline CheckResult matmul_gradient() {
  Rng rng(11);
  auto rand = [&](Shape s) {
    Tensor t = Tensor::zeros(s);
    for (auto& v : t.mutable_data()) v = rng.normal();
    t.set_requires_grad(true);
    return t;
  };
  Tensor a = rand({3, 4}), b = rand({4, 2}), w = rand({3, 2});
  return gradient_report(check_gradients([&] { return sum(mul(matmul(a, b), w)); }, {a, b}, {1e-5, 1e-6, 1e-8}), 1.0);
}

inline CheckResult elementwise_gradients() {
  Rng rng(12);
  auto rand = [&](Shape s, double lo, double hi) {
    Tensor t = Tensor::zeros(s);
    for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
    t.set_requires_grad(true);
    return t;
  };
  Tensor x = rand({2, 5}, -2, 2), y = rand({2, 5}, 0.5, 2), g = rand({5}, 0.5, 1.5), w = rand({2, 5}, -1, 1);
  auto f = [&] {
    Tensor h = add(gelu(x), log(y));
    h = layer_norm(h, g, Tensor());
    h = add(softmax(h, -1), l2_normalize(exp(scale(x, 0.3)), -1));
    return sum(mul(h, w));
  };
  return gradient_report(check_gradients(f, {x, y, g}, {1e-5, 1e-6, 1e-8}), 1.0);
}

inline CheckResult info_nce_oracle() {
  Rng rng(21);
  CheckResult c;
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.index(5), d = 2 + rng.index(5);
    const double tau = rng.uniform(0.05, 1.0);
    const auto a = random_unit_rows(rng, n, d), b = random_unit_rows(rng, n, d);
    const Tensor A({n, d}, a), B({n, d}, b), T = Tensor::scalar(tau);
    const double one = info_nce(A, B, T).item();
    const double sym = symmetric_info_nce(A, B, T).loss.item();
    worst = std::max({worst, std::abs(one - oracle::info_nce(a, b, n, d, tau)),
                      std::abs(sym - oracle::clip_loss(a, b, n, d, tau))});
  }
  c.detail = "max |diff| " + fmt(worst) + " over 100 instances";
  if (!(worst <= 1e-10)) c.fail(c.detail);
  return c;
}

inline CheckResult iss_oracle() {
  Rng rng(22);
  CheckResult c;
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.index(5), d = 2 + rng.index(5);
    const double tau = rng.uniform(0.05, 1.0);
    const auto a = random_unit_rows(rng, n, d), b = random_unit_rows(rng, n, d);
    const double got = iss_loss(Tensor({n, d}, a), Tensor({n, d}, b), tau).item();
    worst = std::max(worst, std::abs(got - oracle::iss(a, b, n, d, tau)));
  }
  c.detail = "max |diff| " + fmt(worst) + " over 100 instances";
  if (!(worst <= 1e-10)) c.fail(c.detail);
  return c;
}

// Values on random instances, then match indices and gradient routing on
// instances with exact ties.
inline CheckResult filip_oracle() {
  Rng rng(23);
  CheckResult c;
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.index(3), t1 = 1 + rng.index(3), t2 = 1 + rng.index(3), d = 2 + rng.index(3);
    const double tau = rng.uniform(0.05, 1.0);
    RandomTokens img = random_tokens(rng, n, t1, d), txt = random_tokens(rng, n, t2, d);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor it = reshape(gather_rows(reshape(img.batch.tokens, {n * t1, d}), [&] {
        std::vector<std::size_t> r;
        for (std::size_t k = 0; k < t1; ++k) r.push_back(i * t1 + k);
        return r;
      }()), {t1, d});
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<std::size_t> rows;
        for (std::size_t k = 0; k < t2; ++k) rows.push_back(j * t2 + k);
        const Tensor tt = gather_rows(reshape(txt.batch.tokens, {n * t2, d}), rows);
        const FilipSimilarity s = filip_similarity(it, img.sets[i].mask, tt, txt.sets[j].mask);
        worst = std::max({worst, std::abs(s.image_side.item() - oracle::sim_image(img.sets[i], txt.sets[j])),
                          std::abs(s.text_side.item() - oracle::sim_text(img.sets[i], txt.sets[j]))});
      }
    }
    const double got = filip_loss(img.batch, txt.batch, Tensor::scalar(tau)).total.item();
    worst = std::max(worst, std::abs(got - oracle::filip_loss(img.sets, txt.sets, tau)));
  }
  c.detail = "max |diff| " + fmt(worst) + " over 100 instances";
  if (!(worst <= 1e-10)) c.fail(c.detail);

  // Ties: duplicated tokens make several maxima exactly equal.
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t t1 = 2 + rng.index(2), t2 = 2 + rng.index(2), d = 3;
    oracle::TokenSet a, b;
    const auto base_a = random_unit_rows(rng, t1, d), base_b = random_unit_rows(rng, t2, d);
    for (std::size_t k = 0; k < t1; ++k) {
      const std::size_t src = k == t1 - 1 ? 0 : k;  // last token repeats the first
      a.tokens.emplace_back(base_a.begin() + static_cast<long>(src * d), base_a.begin() + static_cast<long>((src + 1) * d));
      a.mask.push_back(1);
    }
    for (std::size_t k = 0; k < t2; ++k) {
      const std::size_t src = k == t2 - 1 ? 0 : k;
      b.tokens.emplace_back(base_b.begin() + static_cast<long>(src * d), base_b.begin() + static_cast<long>((src + 1) * d));
      b.mask.push_back(1);
    }
    std::vector<double> sim(t1 * t2);
    for (std::size_t k = 0; k < t1; ++k)
      for (std::size_t m = 0; m < t2; ++m) sim[k * t2 + m] = oracle::vdot(a.tokens[k], b.tokens[m]);
    for (bool image_side : {true, false}) {
      const auto got = token_matches(sim, t1, t2, a.mask, b.mask,
                                     image_side ? MatchDirection::ImageToText : MatchDirection::TextToImage);
      if (got != oracle::matches(a, b, image_side)) c.fail("token match differs from lowest-index oracle under ties");
    }
    // Gradient of sim^I lands on the lowest-index maximum of each row.
    Tensor S({t1, t2}, sim, true);
    TokenGrid g{1, t1, 1, t2, a.mask, b.mask};
    backward(token_max_similarity(S, g, MatchDirection::ImageToText));
    const auto gs = S.grad();
    const auto expect = oracle::matches(a, b, true);
    for (std::size_t k = 0; k < t1; ++k)
      for (std::size_t m = 0; m < t2; ++m) {
        const double want = m == expect[k] ? 1.0 / static_cast<double>(t1) : 0.0;
        if (std::abs(gs[k * t2 + m] - want) > 1e-15) c.fail("gradient routed to a non-lowest tied maximum");
      }
  }
  return c;
}

inline CheckResult nns_oracle() {
  Rng rng(24);
  CheckResult c;
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.index(4), d = 2 + rng.index(4), cap = 4 + rng.index(8);
    const double tau = rng.uniform(0.05, 1.0);
    NNQueue q(cap, d);
    std::vector<oracle::QueueEntry> pushes;
    const std::size_t total = rng.index(2 * cap + 1);
    for (std::size_t k = 0; k < total; ++k) {
      const auto v = random_unit_rows(rng, 1, d);
      const std::uint64_t step = k / 3;
      q.push(v, step);
      pushes.push_back({v, step});
    }
    const auto model = oracle::fifo(pushes, cap);
    bool same = model.size() == q.size();
    for (std::size_t k = 0; same && k < model.size(); ++k)
      same = model[k].vector == q.entries()[k].vector && model[k].step == q.entries()[k].step;
    if (!same) c.fail("queue contents differ from the FIFO model (capacity " + std::to_string(cap) + ")");
    const std::uint64_t now = total / 3;
    const auto img = random_unit_rows(rng, n, d), txt = random_unit_rows(rng, n, d);
    const double got = nns_loss(Tensor({n, d}, img), Tensor({n, d}, txt), q, Tensor::scalar(tau), now).loss.item();
    worst = std::max(worst, std::abs(got - oracle::nns(img, txt, n, d, model, tau, now)));
  }
  if (c.passed) c.detail = "max |diff| " + fmt(worst) + " over 100 instances";
  if (!(worst <= 1e-10)) c.fail("max |diff| " + fmt(worst));
  return c;
}

inline CheckResult analytic_fixtures() {
  CheckResult c;
  auto expect = [&](const char* what, double got, double want, double tol) {
    if (!(std::abs(got - want) <= tol)) c.fail(std::string(what) + ": got " + fmt(got) + ", want " + fmt(want));
  };
  Rng rng(31);
  const Tensor one = unit_rows(rng, 1, 4);
  expect("single pair", info_nce(one, unit_rows(rng, 1, 4), 0.07).item(), 0.0, 0.0);
  for (std::size_t n : {2u, 5u, 16u}) {
    std::vector<double> same(n * 3, 0.0);
    for (std::size_t i = 0; i < n; ++i) same[i * 3] = 1.0;
    const Tensor u({n, 3}, same);
    expect("uniform embeddings", info_nce(u, u, 0.07).item(), std::log(static_cast<double>(n)), 1e-9);
    const Tensor a = unit_rows(rng, n, 5), b = unit_rows(rng, n, 5);
    expect("large temperature", info_nce(a, b, 1e6).item(), std::log(static_cast<double>(n)), 1e-6);
  }
  const Tensor e({2, 2}, {1, 0, 0, 1});
  expect("orthonormal pair", info_nce(e, e, 1.0).item(), std::log1p(std::exp(-1.0)), 1e-9);

  // One token per sample: token-level alignment equals pooled CLIP.
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t n = 1 + rng.index(5), d = 3;
    EmbeddingBatch img, txt;
    img.pooled = unit_rows(rng, n, d);
    txt.pooled = unit_rows(rng, n, d);
    img.tokens = reshape(img.pooled, {n, 1, d});
    txt.tokens = reshape(txt.pooled, {n, 1, d});
    img.token_mask = txt.token_mask = std::vector<std::uint8_t>(n, 1);
    img.token_count = txt.token_count = std::vector<std::size_t>(n, 1);
    const Tensor tau = Tensor::scalar(rng.uniform(0.05, 1.0));
    expect("single-token FILIP", filip_loss(img, txt, tau).total.item(), clip_loss(img, txt, tau).total.item(), 1e-12);
    expect("identity-view MVS", mvs_loss(img.pooled, img.pooled, txt.pooled, txt.pooled, tau).item(),
           clip_loss(img, txt, tau).total.item(), 1e-12);
  }
  if (c.passed) c.detail = "all fixtures within tolerance";
  return c;
}

inline CheckResult composition_identities() {
  CheckResult c;
  FullStackFixture f(41, 3);
  NoGradGuard no_grad;
  const LossBreakdown declip = f.loss(Variant::Declip);
  const LossBreakdown defilip = f.loss(Variant::Defilip);
  if (!(std::abs(declip.total.item() - declip.reconstruct()) <= 1e-12)) c.fail("DeCLIP total does not reconstruct");
  if (!(std::abs(defilip.total.item() - defilip.reconstruct()) <= 1e-12)) c.fail("DeFILIP total does not reconstruct");
  const double diff = defilip.total.item() - declip.total.item();
  if (!(std::abs(diff - f.loss_config.lambda * defilip.term("L_FAS")) <= 1e-12))
    c.fail("DeFILIP - DeCLIP differs from lambda * L_FAS");

  FullStackFixture z(41, 3);
  z.loss_config.alpha = z.loss_config.beta = z.loss_config.gamma = z.loss_config.lambda = 0.0;
  z.loss_config.alpha_slip = 0.0;
  const double clip = z.loss(Variant::Clip).total.item();
  for (Variant v : {Variant::Slip, Variant::Declip, Variant::Defilip})
    if (z.loss(v).total.item() != clip) c.fail(std::string(to_string(v)) + " with zero weights is not exactly CLIP");
  if (c.passed) c.detail = "reconstruction, DeFILIP - DeCLIP and zero-weight collapse exact";
  return c;
}

inline CheckResult model_gradients() {
  CheckResult c;
  std::string summary;
  for (Variant v : {Variant::Clip, Variant::Slip, Variant::Filip, Variant::Declip, Variant::Defilip}) {
    FullStackFixture f(51);
    const GradCheckReport r = f.gradcheck(v);
    summary += std::string(to_string(v)) + " " + fmt(100.0 * r.pass_fraction()) + "% ";
    if (r.pass_fraction() < 0.99) c.fail(std::string(to_string(v)) + ": " + gradient_report(r, 0.99).detail);
  }
  if (c.passed) c.detail = summary;
  return c;
}

}  // namespace checks

inline const std::vector<Check>& all_checks() {
  static const std::vector<Check> list{
      {"autograd.matmul", "matmul gradients against central differences", checks::matmul_gradient},
      {"autograd.elementwise", "gelu/log/exp/softmax/layer_norm/l2_normalize gradients", checks::elementwise_gradients},
      {"loss.info_nce", "InfoNCE and symmetric CLIP loss against the double-loop oracle", checks::info_nce_oracle},
      {"loss.iss", "NT-Xent image self-supervision against the oracle", checks::iss_oracle},
      {"loss.filip", "FILIP similarity/loss and tie-breaking against the nested-loop oracle", checks::filip_oracle},
      {"loss.nns", "nearest-neighbour queue and NNS loss against the exhaustive-scan oracle", checks::nns_oracle},
      {"loss.fixtures", "closed-form InfoNCE, FILIP and MVS fixtures", checks::analytic_fixtures},
      {"loss.composition", "DeCLIP/DeFILIP composition identities", checks::composition_identities},
      {"model.gradients", "full-stack gradients for all five variants", checks::model_gradients},
  };
  return list;
}

}  // namespace clipbench
