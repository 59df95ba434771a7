#pragma once

// Image towers (ViT-style and ConvNet-style), the depth-configurable text
// transformer, and the model that ties them to a learnable temperature.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <memory>
#include <vector>

#include "clipbench/nn.hpp"
#include "clipbench/tokens.hpp"

namespace clipbench {

// Ordered key=value pairs; the textual config block of checkpoints.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace kv {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

inline std::string join(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

// Shortest text that parses back to the identical double.
inline std::string format_double(double d) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, p);
}

}  // namespace kv

struct VitConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t width = 96;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t token_count() const { return grid() * grid(); }

  void validate() const {
    if (!patch_size || !image_size || image_size % patch_size)
      throw ConfigError("vit.image_size must be a positive multiple of vit.patch_size");
    if (!heads || !width || width % heads) throw ConfigError("vit.width must be divisible by vit.heads");
    if (!depth) throw ConfigError("vit.depth must be at least 1");
    if (!embed_dim) throw ConfigError("vit.embed_dim must be positive");
  }
};

struct ConvConfig {
  std::size_t image_size = 32;
  std::vector<std::size_t> channels{32, 64, 96};
  std::vector<std::size_t> kernels{3, 3, 3};
  // 1 = 2x2 average pooling after the stage
  std::vector<std::size_t> pools{1, 1, 0};
  std::size_t embed_dim = 64;

  std::size_t final_grid() const {
    std::size_t g = image_size;
    for (auto p : pools)
      if (p) g /= 2;
    return g;
  }

  void validate() const {
    if (channels.empty() || channels.size() != kernels.size() || channels.size() != pools.size())
      throw ConfigError("conv.channels, conv.kernels and conv.pools must have equal non-zero length");
    std::size_t g = image_size;
    for (std::size_t i = 0; i < pools.size(); ++i) {
      if (!channels[i]) throw ConfigError("conv.channels entries must be positive");
      if (kernels[i] % 2 == 0) throw ConfigError("conv.kernels entries must be odd");
      if (pools[i]) {
        if (g % 2) throw ConfigError("conv.pools: grid not divisible by 2 at stage " + std::to_string(i));
        g /= 2;
      }
    }
    if (g < 2) throw ConfigError("conv: final spatial grid must be at least 2x2");
    if (!embed_dim) throw ConfigError("conv.embed_dim must be positive");
  }
};

inline constexpr std::size_t kMaxContextLength = 76;

struct TextConfig {
  std::size_t vocab_size = 512;
  std::size_t context_length = 32;
  std::size_t width = 96;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;

  void validate() const {
    if (context_length < 2 || context_length > kMaxContextLength)
      throw ConfigError("text.context_length must lie in [2, 76]");
    if (!depth) throw ConfigError("text.depth must be at least 1");
    if (!heads || !width || width % heads) throw ConfigError("text.width must be divisible by text.heads");
    if (vocab_size <= special::kCount) throw ConfigError("text.vocab_size must exceed the reserved ids");
    if (!embed_dim) throw ConfigError("text.embed_dim must be positive");
  }

  // Embedding tables, blocks, final norm and projection; linear in depth.
  std::size_t parameter_count() const {
    return vocab_size * width + context_length * width + depth * TransformerBlock::parameter_count(width) +
           2 * width + width * embed_dim;
  }
};

enum class ImageEncoderKind { Vit, Conv };

inline const char* to_string(ImageEncoderKind k) { return k == ImageEncoderKind::Vit ? "vit" : "conv"; }

struct ModelConfig {
  ImageEncoderKind image_kind = ImageEncoderKind::Vit;
  VitConfig vit;
  ConvConfig conv;
  TextConfig text;
  double init_temperature = 0.07;

  std::size_t image_size() const { return image_kind == ImageEncoderKind::Vit ? vit.image_size : conv.image_size; }
  std::size_t image_embed_dim() const {
    return image_kind == ImageEncoderKind::Vit ? vit.embed_dim : conv.embed_dim;
  }

  void validate() const {
    if (image_kind == ImageEncoderKind::Vit)
      vit.validate();
    else
      conv.validate();
    text.validate();
    if (image_embed_dim() != text.embed_dim)
      throw ConfigError("image and text embed_dim must match");
    if (!(init_temperature > 0.0)) throw ConfigError("model.init_temperature must be positive");
  }

  KeyValues to_kv() const {
    KeyValues out;
    out.emplace_back("model.image_encoder", to_string(image_kind));
    out.emplace_back("model.init_temperature", kv::format_double(init_temperature));
    out.emplace_back("vit.image_size", std::to_string(vit.image_size));
    out.emplace_back("vit.patch_size", std::to_string(vit.patch_size));
    out.emplace_back("vit.width", std::to_string(vit.width));
    out.emplace_back("vit.depth", std::to_string(vit.depth));
    out.emplace_back("vit.heads", std::to_string(vit.heads));
    out.emplace_back("vit.embed_dim", std::to_string(vit.embed_dim));
    out.emplace_back("conv.image_size", std::to_string(conv.image_size));
    out.emplace_back("conv.channels", kv::join(conv.channels));
    out.emplace_back("conv.kernels", kv::join(conv.kernels));
    out.emplace_back("conv.pools", kv::join(conv.pools));
    out.emplace_back("conv.embed_dim", std::to_string(conv.embed_dim));
    out.emplace_back("text.vocab_size", std::to_string(text.vocab_size));
    out.emplace_back("text.context_length", std::to_string(text.context_length));
    out.emplace_back("text.width", std::to_string(text.width));
    out.emplace_back("text.depth", std::to_string(text.depth));
    out.emplace_back("text.heads", std::to_string(text.heads));
    out.emplace_back("text.embed_dim", std::to_string(text.embed_dim));
    return out;
  }

  // Returns false when `key` is not a model key.
  bool set(const std::string& key, const std::string& v) {
    using namespace kv;
    if (key == "model.image_encoder") {
      if (v == "vit")
        image_kind = ImageEncoderKind::Vit;
      else if (v == "conv")
        image_kind = ImageEncoderKind::Conv;
      else
        throw ConfigError("model.image_encoder must be 'vit' or 'conv', got '" + v + "'");
    } else if (key == "model.init_temperature") init_temperature = parse_double(key, v);
    else if (key == "vit.image_size") vit.image_size = parse_size(key, v);
    else if (key == "vit.patch_size") vit.patch_size = parse_size(key, v);
    else if (key == "vit.width") vit.width = parse_size(key, v);
    else if (key == "vit.depth") vit.depth = parse_size(key, v);
    else if (key == "vit.heads") vit.heads = parse_size(key, v);
    else if (key == "vit.embed_dim") vit.embed_dim = parse_size(key, v);
    else if (key == "conv.image_size") conv.image_size = parse_size(key, v);
    else if (key == "conv.channels") conv.channels = parse_sizes(key, v);
    else if (key == "conv.kernels") conv.kernels = parse_sizes(key, v);
    else if (key == "conv.pools") conv.pools = parse_sizes(key, v);
    else if (key == "conv.embed_dim") conv.embed_dim = parse_size(key, v);
    else if (key == "text.vocab_size") text.vocab_size = parse_size(key, v);
    else if (key == "text.context_length") text.context_length = parse_size(key, v);
    else if (key == "text.width") text.width = parse_size(key, v);
    else if (key == "text.depth") text.depth = parse_size(key, v);
    else if (key == "text.heads") text.heads = parse_size(key, v);
    else if (key == "text.embed_dim") text.embed_dim = parse_size(key, v);
    else return false;
    return true;
  }

  bool operator==(const ModelConfig& o) const { return to_kv() == o.to_kv(); }
};

// Pooled and token-level unit embeddings for a batch.
struct EmbeddingBatch {
  Tensor pooled;                          // [N, D]
  Tensor tokens;                          // [N, T, D]
  std::vector<std::uint8_t> token_mask;   // [N * T], 1 = token participates
  std::vector<std::size_t> token_count;   // unmasked tokens per sample
  bool overlapping_receptive_fields = false;

  std::size_t batch() const { return pooled.dim(0); }
  std::size_t dim() const { return pooled.dim(1); }
  std::size_t max_tokens() const { return tokens.dim(1); }
};

namespace detail {

inline constexpr double kPixelMean[3] = {0.48145466, 0.4578275, 0.40821073};
inline constexpr double kPixelStd[3] = {0.26862954, 0.26130258, 0.27577711};

// Per-channel (x - mean) / std on [N, 3, H, W].
inline Tensor normalize_pixels(const Tensor& images) {
  const std::size_t plane = images.dim(2) * images.dim(3);
  std::vector<double> out(images.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / plane) % 3;
    out[i] = (images[i] - kPixelMean[c]) / kPixelStd[c];
  }
  return make_result("normalize_pixels", images.shape(), std::move(out), {images}, [images, plane](Node& self) {
    auto g = grad_sink(images);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / kPixelStd[(i / plane) % 3];
  });
}

inline EmbeddingBatch finish_embeddings(const Tensor& pooled_features, const Tensor& token_features,
                                        const Linear& proj, std::vector<std::uint8_t> mask) {
  EmbeddingBatch e;
  e.pooled = l2_normalize(proj(pooled_features), -1);
  e.tokens = l2_normalize(proj(token_features), -1);
  const std::size_t N = e.tokens.dim(0), T = e.tokens.dim(1);
  e.token_mask = std::move(mask);
  e.token_count.assign(N, 0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t) e.token_count[n] += e.token_mask[n * T + t];
  return e;
}
}  // namespace detail

class VitEncoder {
 public:
  VitEncoder(const VitConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    patch_ = Linear(rng, patch_dim, cfg.width);
    class_token_ = init_weight(rng, {cfg.width});
    positions_ = init_weight(rng, {cfg.token_count() + 1, cfg.width});
    for (std::size_t i = 0; i < cfg.depth; ++i) blocks_.emplace_back(rng, cfg.width, cfg.heads);
    ln_post_ = LayerNorm(cfg.width);
    proj_ = Linear(rng, cfg.width, cfg.embed_dim, false);
  }

  const VitConfig& config() const { return cfg_; }

  // images [N, 3, S, S]
  EmbeddingBatch encode(const Tensor& images) const {
    const std::size_t S = cfg_.image_size, p = cfg_.patch_size, g = cfg_.grid();
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != S || images.dim(3) != S)
      throw ShapeError("vit: expected images [N x 3 x " + std::to_string(S) + " x " + std::to_string(S) +
                       "], got " + shape_str(images.shape()));
    const std::size_t N = images.dim(0), P = g * g, L = P + 1, W = cfg_.width;
    Tensor patches = reshape(permute(reshape(detail::normalize_pixels(images), {N, 3, g, p, g, p}), {0, 2, 4, 1, 3, 5}), {N, P, 3 * p * p});
    Tensor x = patch_(patches);
    Tensor cls = add_broadcast(Tensor::zeros({N, 1, W}), class_token_);
    x = add_broadcast(concat({cls, x}, 1), positions_);
    for (const auto& b : blocks_) x = b(x);
    x = reshape(ln_post_(x), {N * L, W});
    std::vector<std::size_t> cls_rows(N), patch_rows;
    patch_rows.reserve(N * P);
    for (std::size_t n = 0; n < N; ++n) {
      cls_rows[n] = n * L;
      for (std::size_t t = 1; t < L; ++t) patch_rows.push_back(n * L + t);
    }
    Tensor tokens = reshape(gather_rows(x, patch_rows), {N, P, W});
    return detail::finish_embeddings(gather_rows(x, cls_rows), tokens, proj_,
                                     std::vector<std::uint8_t>(N * P, 1));
  }

  void register_params(const std::string& prefix, ParameterList& params) const {
    patch_.register_params(prefix + ".patch", params);
    params.add(prefix + ".class_token", class_token_, true);
    params.add(prefix + ".positions", positions_, true);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].register_params(prefix + ".blocks." + std::to_string(i), params);
    ln_post_.register_params(prefix + ".ln_post", params);
    proj_.register_params(prefix + ".proj", params);
  }

 private:
  VitConfig cfg_;
  Linear patch_;
  Tensor class_token_, positions_;
  LayerNorm ln_post_;
  std::vector<TransformerBlock> blocks_;
  Linear proj_;
};

class ConvEncoder {
 public:
  ConvEncoder(const ConvConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t in = 3;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      kernels_.push_back(init_weight(rng, {cfg.channels[i], in, cfg.kernels[i], cfg.kernels[i]}));
      biases_.push_back(Tensor::zeros({cfg.channels[i]}));
      in = cfg.channels[i];
    }
    proj_ = Linear(rng, in, cfg.embed_dim, false);
  }

  const ConvConfig& config() const { return cfg_; }

  EmbeddingBatch encode(const Tensor& images) const {
    const std::size_t S = cfg_.image_size;
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != S || images.dim(3) != S)
      throw ShapeError("conv: expected images [N x 3 x " + std::to_string(S) + " x " + std::to_string(S) +
                       "], got " + shape_str(images.shape()));
    Tensor x = detail::normalize_pixels(images);
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      x = relu(conv2d(x, kernels_[i], biases_[i], cfg_.kernels[i] / 2));
      if (cfg_.pools[i]) x = avg_pool2d(x, 2);
    }
    const std::size_t N = x.dim(0), C = x.dim(1), G = x.dim(2) * x.dim(3);
    Tensor grid = permute(reshape(x, {N, C, G}), {0, 2, 1});  // [N, G, C]
    EmbeddingBatch e = detail::finish_embeddings(mean_axis(grid, 1), grid, proj_,
                                                 std::vector<std::uint8_t>(N * G, 1));
    e.overlapping_receptive_fields = true;
    return e;
  }

  void register_params(const std::string& prefix, ParameterList& params) const {
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      params.add(prefix + ".stages." + std::to_string(i) + ".kernel", kernels_[i], true);
      params.add(prefix + ".stages." + std::to_string(i) + ".bias", biases_[i], false);
    }
    proj_.register_params(prefix + ".proj", params);
  }

 private:
  ConvConfig cfg_;
  std::vector<Tensor> kernels_, biases_;
  Linear proj_;
};

class TextEncoder {
 public:
  TextEncoder(const TextConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    token_table_ = init_weight(rng, {cfg.vocab_size, cfg.width});
    positions_ = init_weight(rng, {cfg.context_length, cfg.width});
    for (std::size_t i = 0; i < cfg.depth; ++i) blocks_.emplace_back(rng, cfg.width, cfg.heads);
    ln_final_ = LayerNorm(cfg.width);
    proj_ = Linear(rng, cfg.width, cfg.embed_dim, false);
  }

  const TextConfig& config() const { return cfg_; }

  // Final-layer hidden states [N, L, width]; padding keys are masked out of
  // every attention softmax.
  Tensor hidden(const TokenBatch& tokens) const {
    const std::size_t N = tokens.batch, L = tokens.length;
    if (L > cfg_.context_length)
      throw ShapeError("text: sequence length " + std::to_string(L) + " exceeds context " +
                       std::to_string(cfg_.context_length));
    if (tokens.ids.size() != N * L || tokens.valid.size() != N * L)
      throw ShapeError("text: token batch buffers do not match batch x length");
    std::vector<std::size_t> pos_rows(L);
    for (std::size_t i = 0; i < L; ++i) pos_rows[i] = i;
    Tensor x = add_broadcast(embedding(token_table_, tokens.ids, {N, L}), gather_rows(positions_, pos_rows));
    for (const auto& b : blocks_) x = b(x, &tokens.valid);
    return ln_final_(x);
  }

  EmbeddingBatch encode(const TokenBatch& tokens) const {
    const std::size_t N = tokens.batch, L = tokens.length, W = cfg_.width;
    Tensor h = hidden(tokens);
    std::vector<std::size_t> eot(N);
    std::vector<std::uint8_t> mask(N * L, 0);
    for (std::size_t n = 0; n < N; ++n) {
      eot[n] = n * L + tokens.eot_position(n);
      for (std::size_t i = 0; i < L; ++i) mask[n * L + i] = tokens.is_word(n, i) ? 1 : 0;
    }
    return detail::finish_embeddings(gather_rows(reshape(h, {N * L, W}), eot), h, proj_, std::move(mask));
  }

  std::size_t parameter_count() const { return cfg_.parameter_count(); }

  void register_params(const std::string& prefix, ParameterList& params) const {
    params.add(prefix + ".token_table", token_table_, true);
    params.add(prefix + ".positions", positions_, true);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].register_params(prefix + ".blocks." + std::to_string(i), params);
    ln_final_.register_params(prefix + ".ln_final", params);
    proj_.register_params(prefix + ".proj", params);
  }

 private:
  TextConfig cfg_;
  Tensor token_table_, positions_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_final_;
  Linear proj_;
};

inline constexpr double kMinTemperature = 0.005;
inline constexpr double kMaxTemperature = 100.0;

// Both towers, the masked-language-model head used by text self-supervision,
// and the learnable temperature (stored as its logarithm).
class ClipModel {
 public:
  ClipModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0x6d6f64656cULL));
    if (cfg.image_kind == ImageEncoderKind::Vit)
      vit_ = std::make_unique<VitEncoder>(cfg.vit, rng);
    else
      conv_ = std::make_unique<ConvEncoder>(cfg.conv, rng);
    text_ = std::make_unique<TextEncoder>(cfg.text, rng);
    mlm_head_ = Linear(rng, cfg.text.width, cfg.text.vocab_size);
    log_temperature_ = Tensor::scalar(std::log(cfg.init_temperature));

    if (vit_)
      vit_->register_params("image", params_);
    else
      conv_->register_params("image", params_);
    text_->register_params("text", params_);
    mlm_head_.register_params("mlm_head", params_);
    params_.add("log_temperature", log_temperature_, false);
  }

  ClipModel(const ClipModel&) = delete;
  ClipModel& operator=(const ClipModel&) = delete;

  const ModelConfig& config() const { return cfg_; }

  EmbeddingBatch encode_image(const Tensor& images) const {
    return vit_ ? vit_->encode(images) : conv_->encode(images);
  }
  EmbeddingBatch encode_text(const TokenBatch& tokens) const { return text_->encode(tokens); }

  const TextEncoder& text_encoder() const { return *text_; }
  const Linear& mlm_head() const { return mlm_head_; }

  // τ = exp(log τ) as a differentiable scalar.
  Tensor temperature() const { return exp(log_temperature_); }
  double temperature_value() const { return std::exp(log_temperature_.item()); }
  Tensor log_temperature() const { return log_temperature_; }

  void clamp_temperature() {
    auto v = log_temperature_.mutable_data();
    v[0] = std::clamp(v[0], std::log(kMinTemperature), std::log(kMaxTemperature));
  }

  ParameterList& params() { return params_; }
  const ParameterList& params() const { return params_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<VitEncoder> vit_;
  std::unique_ptr<ConvEncoder> conv_;
  std::unique_ptr<TextEncoder> text_;
  Linear mlm_head_;
  Tensor log_temperature_;
  ParameterList params_;
};

}  // namespace clipbench
