#pragma once

// Contrastive supervision terms over unit embeddings: image-text InfoNCE,
// image self-supervision (NT-Xent over two views), token-wise maximum
// similarity (FILIP), masked language modelling, multi-view and
// nearest-neighbour supervision, and the weighted compositions of the five
// training variants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clipbench/encoders.hpp"
#include "clipbench/faults.hpp"
#include "clipbench/rng.hpp"

namespace clipbench {

enum class Variant { Clip, Slip, Filip, Declip, Defilip };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::Clip: return "clip";
    case Variant::Slip: return "slip";
    case Variant::Filip: return "filip";
    case Variant::Declip: return "declip";
    case Variant::Defilip: return "defilip";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(const std::string& s) {
  for (auto v : {Variant::Clip, Variant::Slip, Variant::Filip, Variant::Declip, Variant::Defilip})
    if (s == to_string(v)) return v;
  return std::nullopt;
}

inline constexpr const char* kVariantNames = "clip, slip, filip, declip, defilip";

struct LossConfig {
  bool use_clip = true;
  bool use_iss = false;
  bool use_tss = false;
  bool use_mvs = false;
  bool use_nns = false;
  bool use_fas = false;

  double alpha_slip = 1.0;  // SLIP self-supervision scale
  double alpha = 0.2;       // DeCLIP: ISS + TSS
  double beta = 0.2;        // DeCLIP: MVS
  double gamma = 0.2;       // DeCLIP: NNS
  double lambda = 0.2;      // DeFILIP: FAS
  double ssl_temperature = 0.1;
  double filip_token_fraction = 1.0;
  std::size_t nn_queue_capacity = 1024;

  static LossConfig preset(Variant v) {
    LossConfig c;
    c.use_clip = v != Variant::Filip;
    c.use_iss = v == Variant::Slip || v == Variant::Declip || v == Variant::Defilip;
    c.use_tss = c.use_mvs = c.use_nns = v == Variant::Declip || v == Variant::Defilip;
    c.use_fas = v == Variant::Filip || v == Variant::Defilip;
    return c;
  }

  // Weight of L_CLIP in the DeCLIP-family composition.
  double clip_weight() const { return 1.0 - alpha - beta - gamma; }

  void validate(Variant v) const {
    for (double w : {alpha_slip, alpha, beta, gamma, lambda})
      if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
    if (!(ssl_temperature > 0.0)) throw ConfigError("loss.ssl_temperature must be positive");
    if (!(filip_token_fraction > 0.0 && filip_token_fraction <= 1.0))
      throw ConfigError("loss.filip_token_fraction must lie in (0, 1]");
    if ((v == Variant::Declip || v == Variant::Defilip) && !(clip_weight() > 0.0))
      throw ConfigError("loss: 1 - alpha - beta - gamma must be positive for " + std::string(to_string(v)));
    if (use_nns && nn_queue_capacity == 0) throw ConfigError("loss.nn_queue_capacity must be positive");
  }
};

// Scalar total plus every computed term and its weight in the total.
struct LossBreakdown {
  Tensor total;
  std::vector<std::pair<std::string, double>> terms;
  std::vector<std::pair<std::string, double>> weights;
  std::vector<std::string> warnings;

  bool has(const std::string& name) const {
    return std::any_of(terms.begin(), terms.end(), [&](const auto& t) { return t.first == name; });
  }
  double term(const std::string& name) const {
    for (const auto& [k, v] : terms)
      if (k == name) return v;
    throw ContractError("loss breakdown has no term " + name);
  }
  // Weighted sum of the terms, evaluated independently of the graph.
  double reconstruct() const {
    double s = 0.0;
    for (const auto& [k, w] : weights) s += w * term(k);
    return s;
  }
  void add_term(const std::string& name, double value) {
    for (auto& t : terms)
      if (t.first == name) {
        t.second = value;
        return;
      }
    terms.emplace_back(name, value);
  }
};

namespace detail {

inline constexpr double kUnitTolerance = 1e-6;

inline void require_unit_rows(const char* op, const Tensor& x) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected [N x D] embeddings, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), D = x.dim(1);
  for (std::size_t n = 0; n < N; ++n) {
    double ss = 0.0;
    for (std::size_t d = 0; d < D; ++d) ss += x[n * D + d] * x[n * D + d];
    if (std::abs(std::sqrt(ss) - 1.0) > kUnitTolerance)
      throw ContractError(std::string(op) + ": row " + std::to_string(n) + " is not unit-norm");
  }
}

inline std::vector<std::size_t> arange(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline void require_positive(const char* op, const Tensor& tau) {
  if (tau.numel() != 1) throw ShapeError(std::string(op) + ": temperature must be a scalar");
  if (!(tau.item() > 0.0)) throw ContractError(std::string(op) + ": temperature must be positive");
}

}  // namespace detail

// Mean over anchors i of -log softmax_j(left_i . right_j / τ)[i].
inline Tensor info_nce(const Tensor& left, const Tensor& right, const Tensor& tau) {
  detail::require_positive("info_nce", tau);
  detail::require_unit_rows("info_nce", left);
  detail::require_unit_rows("info_nce", right);
  if (left.shape() != right.shape())
    throw ContractError("info_nce: batch mismatch " + shape_str(left.shape()) + " vs " + shape_str(right.shape()));
  if (left.dim(0) < 1) throw ContractError("info_nce: empty batch");
  Tensor logits = div_scalar(matmul(left, transpose(right)), tau);
  return cross_entropy(logits, detail::arange(left.dim(0)));
}

inline Tensor info_nce(const Tensor& left, const Tensor& right, double tau) {
  if (!(tau > 0.0)) throw ContractError("info_nce: temperature must be positive");
  return info_nce(left, right, Tensor::scalar(tau));
}

struct ClipTerms {
  Tensor image_side;  // L_I
  Tensor text_side;   // L_T
  Tensor loss;        // (L_I + L_T) / 2
};

inline ClipTerms symmetric_info_nce(const Tensor& image, const Tensor& text, const Tensor& tau) {
  if (image.dim(0) != text.dim(0))
    throw ContractError("clip_loss: batch mismatch " + std::to_string(image.dim(0)) + " vs " +
                        std::to_string(text.dim(0)));
  ClipTerms t;
  t.image_side = info_nce(image, text, tau);
  t.text_side = faults().info_nce_transpose ? info_nce(image, text, tau) : info_nce(text, image, tau);
  t.loss = scale(add(t.image_side, t.text_side), 0.5);
  return t;
}

inline LossBreakdown clip_loss(const EmbeddingBatch& image, const EmbeddingBatch& text, const Tensor& tau) {
  ClipTerms t = symmetric_info_nce(image.pooled, text.pooled, tau);
  LossBreakdown b;
  b.total = t.loss;
  b.terms = {{"L_CLIP", t.loss.item()}, {"L_I", t.image_side.item()}, {"L_T", t.text_side.item()}};
  b.weights = {{"L_CLIP", 1.0}};
  return b;
}

// NT-Xent over 2N views: each anchor's positive is its sibling view, the
// denominator runs over the other 2N - 1 embeddings.
inline Tensor iss_loss(const Tensor& view_a, const Tensor& view_b, double tau_ss) {
  if (!(tau_ss > 0.0)) throw ContractError("iss_loss: temperature must be positive");
  if (view_a.rank() != 2 || view_a.dim(0) < 1) throw ContractError("iss_loss: need at least one sample");
  if (view_a.shape() != view_b.shape()) throw ContractError("iss_loss: view batch mismatch");
  detail::require_unit_rows("iss_loss", view_a);
  detail::require_unit_rows("iss_loss", view_b);
  const std::size_t N = view_a.dim(0), M = 2 * N;
  Tensor z = concat({view_a, view_b}, 0);
  Tensor logits = scale(matmul(z, transpose(z)), 1.0 / tau_ss);
  std::vector<std::uint8_t> self(M * M, 0);
  std::vector<std::size_t> targets(M);
  for (std::size_t i = 0; i < M; ++i) {
    self[i * M + i] = 1;
    targets[i] = i < N ? i + N : i - N;
  }
  return cross_entropy(masked_fill(logits, self, -1e30), targets);
}

// ------------------------------------------------------------------ FILIP

enum class MatchDirection { ImageToText, TextToImage };

// Geometry of the all-token similarity matrix S = [N1*T1 x N2*T2].
struct TokenGrid {
  std::size_t images = 0, image_tokens = 0, texts = 0, text_tokens = 0;
  std::vector<std::uint8_t> image_mask, text_mask;
};

namespace detail {

// Index r in [0, n) maximizing value(r) over entries with valid(r); ties go
// to the lowest index (highest under the tie-break fault hook).
template <typename Value, typename Valid>
std::size_t masked_argmax(std::size_t n, Value value, Valid valid) {
  std::size_t best = n;
  double best_v = 0.0;
  const bool prefer_last = faults().filip_tiebreak;
  for (std::size_t r = 0; r < n; ++r) {
    if (!valid(r)) continue;
    const double v = value(r);
    if (best == n || v > best_v || (prefer_last && v == best_v)) {
      best = r;
      best_v = v;
    }
  }
  return best;
}

}  // namespace detail

// Matched opposite-modality token index for every token of one pair
// (the m_k of the token-wise maximum similarity). `sim` is the [n1 x n2]
// token dot-product matrix of that pair.
inline std::vector<std::size_t> token_matches(std::span<const double> sim, std::size_t n1, std::size_t n2,
                                              std::span<const std::uint8_t> mask1,
                                              std::span<const std::uint8_t> mask2, MatchDirection dir) {
  std::vector<std::size_t> out;
  if (dir == MatchDirection::ImageToText) {
    for (std::size_t k = 0; k < n1; ++k)
      out.push_back(mask1[k] ? detail::masked_argmax(n2, [&](std::size_t r) { return sim[k * n2 + r]; },
                                                     [&](std::size_t r) { return mask2[r] != 0; })
                             : n2);
  } else {
    for (std::size_t k = 0; k < n2; ++k)
      out.push_back(mask2[k] ? detail::masked_argmax(n1, [&](std::size_t r) { return sim[r * n2 + k]; },
                                                     [&](std::size_t r) { return mask1[r] != 0; })
                             : n1);
  }
  return out;
}

// For every (image i, text j) pair: the mean over one side's valid tokens of
// the maximum similarity against the other side's valid tokens. Result is
// [N1 x N2]; the gradient flows only into the selected maxima.
inline Tensor token_max_similarity(const Tensor& S, const TokenGrid& g, MatchDirection dir) {
  const std::size_t R = g.images * g.image_tokens, C = g.texts * g.text_tokens;
  if (S.rank() != 2 || S.dim(0) != R || S.dim(1) != C)
    throw ShapeError("token_max_similarity: similarity matrix " + shape_str(S.shape()) + " does not match token grid");
  std::vector<std::size_t> img_count(g.images, 0), txt_count(g.texts, 0);
  for (std::size_t i = 0; i < g.images; ++i)
    for (std::size_t k = 0; k < g.image_tokens; ++k) img_count[i] += g.image_mask[i * g.image_tokens + k];
  for (std::size_t j = 0; j < g.texts; ++j)
    for (std::size_t k = 0; k < g.text_tokens; ++k) txt_count[j] += g.text_mask[j * g.text_tokens + k];
  for (auto c : img_count)
    if (!c) throw DegenerateInputError("token_max_similarity: image with zero unmasked tokens");
  for (auto c : txt_count)
    if (!c) throw DegenerateInputError("token_max_similarity: text with zero unmasked tokens");

  // Selected entries of S (flat indices) and their weights per output pair.
  struct Pick {
    std::size_t pair, entry;
    double weight;
  };
  auto picks = std::make_shared<std::vector<Pick>>();
  std::vector<double> out(g.images * g.texts, 0.0);
  const auto s = S.data();
  for (std::size_t i = 0; i < g.images; ++i)
    for (std::size_t j = 0; j < g.texts; ++j) {
      double acc = 0.0;
      const std::size_t pair = i * g.texts + j;
      if (dir == MatchDirection::ImageToText) {
        const double w = 1.0 / static_cast<double>(img_count[i]);
        for (std::size_t k = 0; k < g.image_tokens; ++k) {
          if (!g.image_mask[i * g.image_tokens + k]) continue;
          const std::size_t row = (i * g.image_tokens + k) * C + j * g.text_tokens;
          const std::size_t r = detail::masked_argmax(
              g.text_tokens, [&](std::size_t r) { return s[row + r]; },
              [&](std::size_t r) { return g.text_mask[j * g.text_tokens + r] != 0; });
          acc += s[row + r];
          picks->push_back({pair, row + r, w});
        }
        out[pair] = acc * w;
      } else {
        const double w = 1.0 / static_cast<double>(txt_count[j]);
        for (std::size_t k = 0; k < g.text_tokens; ++k) {
          if (!g.text_mask[j * g.text_tokens + k]) continue;
          const std::size_t col = j * g.text_tokens + k;
          const std::size_t r = detail::masked_argmax(
              g.image_tokens, [&](std::size_t r) { return s[(i * g.image_tokens + r) * C + col]; },
              [&](std::size_t r) { return g.image_mask[i * g.image_tokens + r] != 0; });
          acc += s[(i * g.image_tokens + r) * C + col];
          picks->push_back({pair, (i * g.image_tokens + r) * C + col, w});
        }
        out[pair] = acc * w;
      }
    }
  return make_result("token_max_similarity", {g.images, g.texts}, std::move(out), {S},
                     [S, picks](detail::Node& self) {
                       auto gs = grad_sink(S);
                       for (const auto& p : *picks) gs[p.entry] += self.grad[p.pair] * p.weight;
                     });
}

struct FilipSimilarity {
  Tensor image_side;  // sim^I
  Tensor text_side;   // sim^T
};

// Token-wise maximum similarity of one image-text pair.
// img_tokens [n1 x D], txt_tokens [n2 x D], masks select participating tokens.
inline FilipSimilarity filip_similarity(const Tensor& img_tokens, const std::vector<std::uint8_t>& img_mask,
                                        const Tensor& txt_tokens, const std::vector<std::uint8_t>& txt_mask) {
  if (img_tokens.rank() != 2 || txt_tokens.rank() != 2 || img_tokens.dim(1) != txt_tokens.dim(1))
    throw ShapeError("filip_similarity: token matrices " + shape_str(img_tokens.shape()) + " and " +
                     shape_str(txt_tokens.shape()) + " are incompatible");
  TokenGrid g{1, img_tokens.dim(0), 1, txt_tokens.dim(0), img_mask, txt_mask};
  if (img_mask.size() != g.image_tokens || txt_mask.size() != g.text_tokens)
    throw ShapeError("filip_similarity: mask length mismatch");
  Tensor S = matmul(img_tokens, transpose(txt_tokens));
  return {token_max_similarity(S, g, MatchDirection::ImageToText),
          token_max_similarity(S, g, MatchDirection::TextToImage)};
}

// Indices of the ceil(fraction * n) highest scores (at least one), returned
// in ascending index order. Ties keep the lower index.
inline std::vector<std::size_t> select_topk_tokens(std::span<const double> scores, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("select_topk_tokens: fraction must lie in (0, 1]");
  const std::size_t n = scores.size();
  if (n == 0) return {};
  const std::size_t keep =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)), 1, n);
  std::vector<std::size_t> idx = detail::arange(n);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace detail {

// Restricts each sample's token mask to its top-scoring fraction; a token's
// score is its maximum similarity against every opposite-modality token in
// the batch.
inline void reduce_token_masks(const Tensor& S, TokenGrid& g, double fraction) {
  const std::size_t C = g.texts * g.text_tokens;
  const auto s = S.data();
  auto reduce = [&](std::size_t samples, std::size_t tokens, std::vector<std::uint8_t>& mask,
                    const std::vector<std::uint8_t>& other_mask, bool rows) {
    for (std::size_t i = 0; i < samples; ++i) {
      std::vector<std::size_t> positions;
      std::vector<double> scores;
      for (std::size_t k = 0; k < tokens; ++k) {
        if (!mask[i * tokens + k]) continue;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t o = 0; o < other_mask.size(); ++o) {
          if (!other_mask[o]) continue;
          const double v = rows ? s[(i * tokens + k) * C + o] : s[o * C + i * tokens + k];
          best = std::max(best, v);
        }
        positions.push_back(k);
        scores.push_back(best);
      }
      std::vector<std::uint8_t> keep(tokens, 0);
      for (auto p : select_topk_tokens(scores, fraction)) keep[positions[p]] = 1;
      std::copy(keep.begin(), keep.end(), mask.begin() + static_cast<long>(i * tokens));
    }
  };
  const auto text_mask = g.text_mask;
  const auto image_mask = g.image_mask;
  reduce(g.images, g.image_tokens, g.image_mask, text_mask, true);
  reduce(g.texts, g.text_tokens, g.text_mask, image_mask, false);
}

}  // namespace detail

// Fine-grained alignment loss: symmetric InfoNCE whose image-side logits are
// sim^I(i, j) / τ and text-side logits sim^T(i, j) / τ.
inline LossBreakdown filip_loss(const EmbeddingBatch& image, const EmbeddingBatch& text, const Tensor& tau,
                                double token_fraction = 1.0) {
  detail::require_positive("filip_loss", tau);
  if (image.batch() != text.batch()) throw ContractError("filip_loss: batch mismatch");
  if (!image.tokens.defined() || !text.tokens.defined()) throw ContractError("filip_loss: token embeddings missing");
  const std::size_t N = image.batch(), T1 = image.max_tokens(), T2 = text.max_tokens(), D = image.dim();
  TokenGrid g{N, T1, N, T2, image.token_mask, text.token_mask};
  Tensor S = matmul(reshape(image.tokens, {N * T1, D}), transpose(reshape(text.tokens, {N * T2, D})));
  if (token_fraction < 1.0) detail::reduce_token_masks(S, g, token_fraction);
  Tensor sim_i = token_max_similarity(S, g, MatchDirection::ImageToText);
  Tensor sim_t = token_max_similarity(S, g, MatchDirection::TextToImage);
  const auto targets = detail::arange(N);
  Tensor li = cross_entropy(div_scalar(sim_i, tau), targets);
  Tensor lt = cross_entropy(div_scalar(transpose(sim_t), tau), targets);
  LossBreakdown b;
  b.total = scale(add(li, lt), 0.5);
  b.terms = {{"L_FAS", b.total.item()}};
  b.weights = {{"L_FAS", 1.0}};
  if (image.overlapping_receptive_fields)
    b.warnings.push_back(
        "kind=filip_overlapping_receptive_fields detail=convnet grid tokens overlap; token-level alignment "
        "assumes non-overlapping image tokens");
  return b;
}

// ------------------------------------------------------------------- MLM

struct MaskedTokens {
  TokenBatch input;                     // ids after masking
  std::vector<std::size_t> positions;   // flat n * length + i
  std::vector<std::size_t> targets;     // original ids at `positions`
  std::size_t skipped_sequences = 0;    // sequences with nothing to mask
};

inline constexpr double kMaskFraction = 0.15;

// Masks 15% of each sequence's word positions (at least one): 80% become
// [MASK], 10% a random id, 10% stay unchanged.
inline MaskedTokens mask_for_mlm(const TokenBatch& tokens, std::size_t vocab_size, std::uint64_t seed) {
  MaskedTokens m;
  m.input = tokens;
  Rng rng(seed);
  for (std::size_t n = 0; n < tokens.batch; ++n) {
    std::vector<std::size_t> words;
    for (std::size_t i = 0; i < tokens.length; ++i)
      if (tokens.is_word(n, i)) words.push_back(i);
    if (words.empty()) {
      ++m.skipped_sequences;
      continue;
    }
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(kMaskFraction * static_cast<double>(words.size()) + 0.5)));
    rng.shuffle(words.begin(), words.end());
    words.resize(count);
    std::sort(words.begin(), words.end());
    for (auto i : words) {
      const std::size_t flat = n * tokens.length + i;
      m.positions.push_back(flat);
      m.targets.push_back(static_cast<std::size_t>(tokens.ids[flat]));
      const double r = rng.uniform();
      if (r < 0.8)
        m.input.ids[flat] = special::kMask;
      else if (r < 0.9)
        m.input.ids[flat] = static_cast<int>(special::kCount + rng.index(vocab_size - special::kCount));
    }
  }
  return m;
}

// Cross-entropy of the vocabulary head at masked positions; an empty mask
// set contributes exactly zero.
inline Tensor tss_loss(const MaskedTokens& masked, const TextEncoder& encoder, const Linear& head) {
  if (masked.positions.empty()) return Tensor::scalar(0.0);
  const std::size_t W = encoder.config().width;
  Tensor h = reshape(encoder.hidden(masked.input), {masked.input.batch * masked.input.length, W});
  return cross_entropy(head(gather_rows(h, masked.positions)), masked.targets);
}

// ------------------------------------------------------------------ MVS

// Mean of the symmetric InfoNCE losses of the three pairings that involve an
// augmented view: (aug image, text), (image, aug text), (aug image, aug text).
inline Tensor mvs_loss(const Tensor& image, const Tensor& image_aug, const Tensor& text, const Tensor& text_aug,
                       const Tensor& tau) {
  for (const Tensor* t : {&image_aug, &text, &text_aug})
    if (t->shape() != image.shape()) throw ContractError("mvs_loss: batch mismatch");
  Tensor a = symmetric_info_nce(image_aug, text, tau).loss;
  Tensor b = symmetric_info_nce(image, text_aug, tau).loss;
  Tensor c = symmetric_info_nce(image_aug, text_aug, tau).loss;
  return scale(add(add(a, b), c), 1.0 / 3.0);
}

// ------------------------------------------------------------------ NNS

// FIFO ring of past text embeddings. Every entry carries the step that
// inserted it; lookups skip entries from the querying step.
class NNQueue {
 public:
  NNQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    if (!capacity || !dim) throw ConfigError("NNQueue: capacity and dimension must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  struct Entry {
    std::vector<double> vector;
    std::uint64_t step = 0;
  };

  // Oldest first.
  const std::deque<Entry>& entries() const { return entries_; }

  void push(std::span<const double> rows, std::uint64_t step) {
    if (rows.size() % dim_) throw ShapeError("NNQueue::push: row buffer not a multiple of the dimension");
    for (std::size_t off = 0; off < rows.size(); off += dim_) {
      Entry e{std::vector<double>(rows.begin() + static_cast<long>(off), rows.begin() + static_cast<long>(off + dim_)),
              step};
      double ss = 0.0;
      for (double v : e.vector) ss += v * v;
      if (std::abs(std::sqrt(ss) - 1.0) > detail::kUnitTolerance)
        throw ContractError("NNQueue::push: vector is not unit-norm");
      if (entries_.size() == capacity_) {
        if (faults().queue_fifo)
          entries_.pop_back();
        else
          entries_.pop_front();
      }
      entries_.push_back(std::move(e));
    }
  }

  // Entry index (oldest = 0) with the highest cosine similarity to `query`;
  // ties keep the older entry.
  std::optional<std::size_t> nearest(std::span<const double> query, std::uint64_t current_step) const {
    if (query.size() != dim_) throw ShapeError("NNQueue::nearest: query dimension mismatch");
    std::optional<std::size_t> best;
    double best_v = 0.0;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].step == current_step) continue;
      double dot = 0.0;
      for (std::size_t d = 0; d < dim_; ++d) dot += query[d] * entries_[i].vector[d];
      if (!best || dot > best_v) {
        best = i;
        best_v = dot;
      }
    }
    return best;
  }

  void clear() { entries_.clear(); }
  void restore(std::deque<Entry> entries) {
    if (entries.size() > capacity_) throw ArtifactMismatchError("NNQueue: stored entries exceed capacity");
    entries_ = std::move(entries);
  }

 private:
  std::size_t capacity_, dim_;
  std::deque<Entry> entries_;
};

struct NnsResult {
  Tensor loss;
  bool skipped = false;                  // no eligible queue entries
  std::vector<std::size_t> neighbours;   // queue index per text
};

// Symmetric InfoNCE between images and the queue neighbours of their texts.
// Enqueueing the step's texts is the caller's job, after every lookup.
inline NnsResult nns_loss(const Tensor& image, const Tensor& text, const NNQueue& queue, const Tensor& tau,
                          std::uint64_t step) {
  detail::require_unit_rows("nns_loss", image);
  detail::require_unit_rows("nns_loss", text);
  if (image.shape() != text.shape()) throw ContractError("nns_loss: batch mismatch");
  NnsResult r;
  const std::size_t N = text.dim(0), D = text.dim(1);
  std::vector<double> retrieved;
  retrieved.reserve(N * D);
  for (std::size_t n = 0; n < N; ++n) {
    auto idx = queue.nearest(text.data().subspan(n * D, D), step);
    if (!idx) {
      r.skipped = true;
      r.neighbours.clear();
      r.loss = Tensor::scalar(0.0);
      return r;
    }
    r.neighbours.push_back(*idx);
    const auto& v = queue.entries()[*idx].vector;
    retrieved.insert(retrieved.end(), v.begin(), v.end());
  }
  Tensor nn(Shape{N, D}, std::move(retrieved));
  r.loss = symmetric_info_nce(image, nn, tau).loss;
  return r;
}

// ------------------------------------------------------------ composition

// Everything a variant may consume for one step. Unused members may be null.
struct SupervisionInputs {
  const EmbeddingBatch* image = nullptr;
  const EmbeddingBatch* text = nullptr;
  const EmbeddingBatch* image_view_a = nullptr;  // also the augmented image for MVS
  const EmbeddingBatch* image_view_b = nullptr;
  const EmbeddingBatch* text_aug = nullptr;
  Tensor tss;                                     // precomputed L_TSS
  const NNQueue* queue = nullptr;
  std::uint64_t step = 0;
  Tensor temperature;
};

struct CompositionStats {
  std::size_t nns_skipped = 0;
};

namespace detail {

inline const EmbeddingBatch& need(const EmbeddingBatch* e, const char* what) {
  if (!e) throw ContractError(std::string("loss composition: missing ") + what);
  return *e;
}

// (1 - α - β - γ) L_CLIP + α (L_ISS + L_TSS) + β L_MVS + γ L_NNS [+ λ L_FAS]
inline LossBreakdown declip_family(const SupervisionInputs& in, const LossConfig& cfg, bool with_fas,
                                   CompositionStats* stats) {
  const Variant v = with_fas ? Variant::Defilip : Variant::Declip;
  cfg.validate(v);
  if (!(cfg.use_clip && cfg.use_iss && cfg.use_tss && cfg.use_mvs && cfg.use_nns) || (with_fas && !cfg.use_fas))
    throw ConfigError(std::string(to_string(v)) + " requires every supervision flag it composes to be enabled");
  const auto& img = need(in.image, "image embeddings");
  const auto& txt = need(in.text, "text embeddings");
  const auto& va = need(in.image_view_a, "image view a");
  const auto& vb = need(in.image_view_b, "image view b");
  const auto& ta = need(in.text_aug, "augmented text");
  if (!in.tss.defined()) throw ContractError("loss composition: missing L_TSS");
  if (!in.queue) throw ContractError("loss composition: missing NN queue");

  LossBreakdown clip = clip_loss(img, txt, in.temperature);
  Tensor iss = iss_loss(va.pooled, vb.pooled, cfg.ssl_temperature);
  Tensor mvs = mvs_loss(img.pooled, va.pooled, txt.pooled, ta.pooled, in.temperature);
  NnsResult nns = nns_loss(img.pooled, txt.pooled, *in.queue, in.temperature, in.step);
  if (nns.skipped && stats) ++stats->nns_skipped;

  const double wc = cfg.clip_weight();
  Tensor total = add(add(add(scale(clip.total, wc), scale(add(iss, in.tss), cfg.alpha)), scale(mvs, cfg.beta)),
                     scale(nns.loss, cfg.gamma));
  LossBreakdown b;
  b.terms = clip.terms;
  b.add_term("L_ISS", iss.item());
  b.add_term("L_TSS", in.tss.item());
  b.add_term("L_MVS", mvs.item());
  b.add_term("L_NNS", nns.loss.item());
  b.weights = {{"L_CLIP", wc}, {"L_ISS", cfg.alpha}, {"L_TSS", cfg.alpha}, {"L_MVS", cfg.beta}, {"L_NNS", cfg.gamma}};
  if (with_fas) {
    LossBreakdown fas = filip_loss(img, txt, in.temperature, cfg.filip_token_fraction);
    total = add(total, scale(fas.total, cfg.lambda));
    b.add_term("L_FAS", fas.total.item());
    b.weights.emplace_back("L_FAS", cfg.lambda);
    b.warnings = fas.warnings;
  }
  b.total = total;
  return b;
}

}  // namespace detail

inline LossBreakdown slip_loss(const SupervisionInputs& in, const LossConfig& cfg) {
  cfg.validate(Variant::Slip);
  LossBreakdown b = clip_loss(detail::need(in.image, "image embeddings"), detail::need(in.text, "text embeddings"),
                              in.temperature);
  Tensor iss = iss_loss(detail::need(in.image_view_a, "image view a").pooled,
                        detail::need(in.image_view_b, "image view b").pooled, cfg.ssl_temperature);
  b.total = add(b.total, scale(iss, cfg.alpha_slip));
  b.add_term("L_ISS", iss.item());
  b.weights.emplace_back("L_ISS", cfg.alpha_slip);
  return b;
}

inline LossBreakdown declip_loss(const SupervisionInputs& in, const LossConfig& cfg,
                                 CompositionStats* stats = nullptr) {
  return detail::declip_family(in, cfg, false, stats);
}

inline LossBreakdown defilip_loss(const SupervisionInputs& in, const LossConfig& cfg,
                                  CompositionStats* stats = nullptr) {
  return detail::declip_family(in, cfg, true, stats);
}

inline LossBreakdown compute_loss(Variant v, const SupervisionInputs& in, const LossConfig& cfg,
                                  CompositionStats* stats = nullptr) {
  switch (v) {
    case Variant::Clip:
      cfg.validate(v);
      return clip_loss(detail::need(in.image, "image embeddings"), detail::need(in.text, "text embeddings"),
                       in.temperature);
    case Variant::Slip: return slip_loss(in, cfg);
    case Variant::Filip:
      cfg.validate(v);
      return filip_loss(detail::need(in.image, "image embeddings"), detail::need(in.text, "text embeddings"),
                        in.temperature, cfg.filip_token_fraction);
    case Variant::Declip: return declip_loss(in, cfg, stats);
    case Variant::Defilip: return defilip_loss(in, cfg, stats);
  }
  throw ContractError("compute_loss: unknown variant");
}

// Which inputs a variant consumes.
struct VariantNeeds {
  bool image_views = false;
  bool text_aug = false;
  bool tss = false;
  bool queue = false;
};

inline VariantNeeds needs_of(Variant v) {
  VariantNeeds n;
  n.image_views = v == Variant::Slip || v == Variant::Declip || v == Variant::Defilip;
  n.text_aug = n.tss = n.queue = v == Variant::Declip || v == Variant::Defilip;
  return n;
}

}  // namespace clipbench
