#pragma once

// Parameter registry and the transformer building blocks shared by the
// image and text towers.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "clipbench/ops.hpp"
#include "clipbench/rng.hpp"

namespace clipbench {

struct Parameter {
  std::string name;
  Tensor value;
  bool decay = true;  // participates in decoupled weight decay
};

class ParameterList {
 public:
  void add(std::string name, Tensor value, bool decay) {
    value.set_requires_grad(true);
    items_.push_back({std::move(name), std::move(value), decay});
  }

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.numel();
    return n;
  }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : items_) out.push_back(p.value);
    return out;
  }

  void zero_grad() {
    for (auto& p : items_) p.value.zero_grad();
  }

 private:
  std::vector<Parameter> items_;
};

inline constexpr double kInitStd = 0.02;

inline Tensor init_weight(Rng& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.truncated_normal(kInitStd);
  return t;
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when bias-free

  Linear() = default;
  Linear(Rng& rng, std::size_t in, std::size_t out, bool with_bias = true)
      : weight(init_weight(rng, {in, out})), bias(with_bias ? Tensor::zeros({out}) : Tensor()) {}

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void register_params(const std::string& prefix, ParameterList& params) const {
    params.add(prefix + ".weight", weight, true);
    if (bias.defined()) params.add(prefix + ".bias", bias, false);
  }
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(Tensor::full({d}, 1.0)), bias(Tensor::zeros({d})) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void register_params(const std::string& prefix, ParameterList& params) const {
    params.add(prefix + ".gain", gain, false);
    params.add(prefix + ".bias", bias, false);
  }
};

// Multi-head self-attention over [N, L, D]. `key_valid` (N*L, optional)
// excludes keys from every query's softmax.
struct SelfAttention {
  std::size_t heads = 1;
  Linear q, k, v, out;

  SelfAttention() = default;
  SelfAttention(Rng& rng, std::size_t width, std::size_t heads_)
      : heads(heads_), q(rng, width, width), k(rng, width, width), v(rng, width, width), out(rng, width, width) {}

  Tensor operator()(const Tensor& x, const std::vector<std::uint8_t>* key_valid = nullptr) const {
    const std::size_t N = x.dim(0), L = x.dim(1), D = x.dim(2), dh = D / heads;
    auto split = [&](const Tensor& t) {
      return reshape(permute(reshape(t, {N, L, heads, dh}), {0, 2, 1, 3}), {N * heads, L, dh});
    };
    Tensor qh = split(q(x)), kh = split(k(x)), vh = split(v(x));
    Tensor scores = scale(bmm(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (key_valid) {
      std::vector<std::uint8_t> masked(N * heads * L * L, 0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < L; ++j)
              masked[((n * heads + h) * L + i) * L + j] = (*key_valid)[n * L + j] ? 0 : 1;
      scores = masked_fill(scores, masked, -1e30);
    }
    Tensor ctx = bmm(softmax(scores, -1), vh);
    ctx = reshape(permute(reshape(ctx, {N, heads, L, dh}), {0, 2, 1, 3}), {N, L, D});
    return out(ctx);
  }

  void register_params(const std::string& prefix, ParameterList& params) const {
    q.register_params(prefix + ".q", params);
    k.register_params(prefix + ".k", params);
    v.register_params(prefix + ".v", params);
    out.register_params(prefix + ".out", params);
  }
};

// Pre-norm transformer block with a 4x GELU MLP.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  SelfAttention attn;
  Linear fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(Rng& rng, std::size_t width, std::size_t heads)
      : ln1(width), ln2(width), attn(rng, width, heads), fc1(rng, width, 4 * width), fc2(rng, 4 * width, width) {}

  Tensor operator()(const Tensor& x, const std::vector<std::uint8_t>* key_valid = nullptr) const {
    Tensor h = add(x, attn(ln1(x), key_valid));
    return add(h, fc2(gelu(fc1(ln2(h)))));
  }

  void register_params(const std::string& prefix, ParameterList& params) const {
    ln1.register_params(prefix + ".ln1", params);
    attn.register_params(prefix + ".attn", params);
    ln2.register_params(prefix + ".ln2", params);
    fc1.register_params(prefix + ".fc1", params);
    fc2.register_params(prefix + ".fc2", params);
  }

  static std::size_t parameter_count(std::size_t width) {
    // two layernorms, four attention projections, two MLP layers
    return 2 * 2 * width + 4 * (width * width + width) + (width * 4 * width + 4 * width) +
           (4 * width * width + width);
  }
};

}  // namespace clipbench
