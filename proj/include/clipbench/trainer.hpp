#pragma once

// AdamW with linear warmup and cosine decay, driving any supervision variant
// over a paired dataset, with resumable checkpoints and a metrics log.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "clipbench/augment.hpp"
#include "clipbench/checkpoint.hpp"
#include "clipbench/data.hpp"
#include "clipbench/encoders.hpp"
#include "clipbench/supervision.hpp"
#include "clipbench/zeroshot.hpp"

namespace clipbench {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double base_lr = 1e-4;
  double peak_lr = 1e-3;
  double warmup_epochs = 1.0;
  double weight_decay = 0.1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 0;
  Variant variant = Variant::Clip;
  std::size_t stop_after_steps = 0;  // 0: run every epoch

  void validate() const {
    if (!batch_size) throw ConfigError("train.batch_size must be positive");
    if (!(base_lr > 0.0 && peak_lr >= base_lr)) throw ConfigError("train: need peak_lr >= base_lr > 0");
    if (!(warmup_epochs >= 0.0) || (epochs && warmup_epochs > static_cast<double>(epochs)))
      throw ConfigError("train.warmup_epochs must lie in [0, epochs]");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
  }
};

// Linear from base to peak over the warmup steps, then cosine from peak to 0
// at total_steps.
struct LrSchedule {
  double base_lr = 1e-4, peak_lr = 1e-3;
  std::size_t warmup_steps = 0, total_steps = 0;

  static LrSchedule from(const TrainConfig& c, std::size_t steps_per_epoch) {
    LrSchedule s;
    s.base_lr = c.base_lr;
    s.peak_lr = c.peak_lr;
    s.total_steps = c.epochs * steps_per_epoch;
    s.warmup_steps = std::min(
        s.total_steps, static_cast<std::size_t>(std::ceil(c.warmup_epochs * static_cast<double>(steps_per_epoch))));
    return s;
  }
};

inline double lr_at(std::size_t step, const LrSchedule& s) {
  if (step < s.warmup_steps)
    return s.base_lr + (s.peak_lr - s.base_lr) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double weight_decay = 0.1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamWConfig from(const TrainConfig& c) { return {c.weight_decay, c.beta1, c.beta2, c.eps}; }
};

struct AdamState {
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;
  bool operator==(const AdamState&) const = default;
};

// Decoupled decay (p -= lr * wd * p) on decaying parameters, then the
// bias-corrected Adam update.
inline void adamw_step(ParameterList& params, AdamState& state, double lr, const AdamWConfig& cfg) {
  auto& items = params.items();
  if (state.m.empty()) {
    for (const auto& p : items) {
      state.m.emplace_back(p.value.numel(), 0.0);
      state.v.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (state.m.size() != items.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  for (const auto& p : items) {
    const auto g = p.value.grad();
    for (double x : g)
      if (!std::isfinite(x)) throw NonFiniteError("non-finite gradient in parameter " + p.name);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    const auto g = p.value.grad();
    auto w = p.value.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double shrink = p.decay && cfg.weight_decay != 0.0 ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (shrink != 1.0) w[k] *= shrink;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

// ------------------------------------------------------------- train state

struct TrainState {
  std::uint64_t step = 0;  // next step to run
  double best_accuracy = -1.0;
  AdamState adam;
  std::optional<NNQueue> queue;
};

inline ExtensionBlock encode_progress(const TrainState& s) {
  ByteWriter w;
  w.u64(s.step);
  w.f64(s.best_accuracy);
  return {"TRST", std::move(w.bytes())};
}

inline ExtensionBlock encode_adam(const AdamState& a) {
  ByteWriter w;
  w.u64(a.t);
  w.u64(a.m.size());
  for (std::size_t i = 0; i < a.m.size(); ++i) {
    w.f64s(a.m[i]);
    w.f64s(a.v[i]);
  }
  return {"ADAM", std::move(w.bytes())};
}

inline ExtensionBlock encode_queue(const NNQueue& q) {
  ByteWriter w;
  w.u64(q.capacity());
  w.u64(q.dim());
  w.u64(q.size());
  for (const auto& e : q.entries()) {
    w.u64(e.step);
    w.f64s(e.vector);
  }
  return {"NNQU", std::move(w.bytes())};
}

inline void decode_progress(const ExtensionBlock& b, TrainState& s) {
  ByteReader r(b.bytes, "TRST block");
  s.step = r.u64();
  s.best_accuracy = r.f64();
}

inline AdamState decode_adam(const ExtensionBlock& b) {
  ByteReader r(b.bytes, "ADAM block");
  AdamState a;
  a.t = r.u64();
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    a.m.push_back(r.f64s());
    a.v.push_back(r.f64s());
  }
  return a;
}

inline NNQueue decode_queue(const ExtensionBlock& b) {
  ByteReader r(b.bytes, "NNQU block");
  const auto capacity = r.u64(), dim = r.u64(), n = r.u64();
  NNQueue q(capacity, dim);
  std::deque<NNQueue::Entry> entries;
  for (std::uint64_t i = 0; i < n; ++i) {
    NNQueue::Entry e;
    e.step = r.u64();
    e.vector = r.f64s();
    if (e.vector.size() != dim) throw ArtifactMismatchError("NNQU block: entry dimension mismatch");
    entries.push_back(std::move(e));
  }
  q.restore(std::move(entries));
  return q;
}

// --------------------------------------------------------------- training

struct TrainingData {
  std::vector<PairRecord> train;
  std::vector<PairRecord> val;  // must carry labels
  std::vector<std::string> class_names;
};

struct TrainSetup {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss = LossConfig::preset(Variant::Clip);
  ImageAugPolicy image_aug;
  TextAugPolicy text_aug;
  PromptSet prompts = PromptSet::defaults();
  std::string out_dir;
  std::string resume_from;        // checkpoint path, empty for a fresh run
  std::ostream* progress = nullptr;
  KeyValues extra_config;         // copied into every checkpoint
};

struct TrainResult {
  std::uint64_t steps = 0;
  std::vector<double> epoch_accuracy;
  double final_accuracy = -1.0;
  double best_accuracy = -1.0;
  bool stopped_early = false;
  std::size_t nns_skipped = 0;
  std::vector<std::string> warnings;
};

inline std::string format_breakdown(std::uint64_t step, std::size_t epoch, double lr, double tau,
                                    const LossBreakdown& b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "step=%llu epoch=%zu lr=%.9e tau=%.6f total=%.6f", static_cast<unsigned long long>(step),
                epoch, lr, tau, b.total.item());
  std::string line = buf;
  for (const auto& [k, v] : b.terms) {
    std::snprintf(buf, sizeof buf, " %s=%.6f", k.c_str(), v);
    line += buf;
  }
  return line;
}

inline Vocab build_vocab(const std::vector<PairRecord>& records, const SynonymTable& synonyms, std::size_t vocab_size) {
  std::vector<std::vector<std::string>> corpora;
  for (const auto& r : records) corpora.push_back(split_words(r.caption));
  corpora.push_back(synonyms.words());
  return Vocab::build(corpora, vocab_size);
}

inline std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (std::size_t i = 0; i < names.size(); ++i) s += (i ? "|" : "") + names[i];
  return s;
}

inline std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '|')) out.push_back(item);
  return out;
}

class Trainer {
 public:
  Trainer(TrainSetup, TrainingData&&) = delete;
  Trainer(TrainSetup setup, const TrainingData& data)
      : s_(std::move(setup)), data_(data), model_(validated(s_), s_.train.seed),
        loader_(data.train, s_.train.batch_size, derive_seed(s_.train.seed, 0x6c6f61646572ULL)) {
    if (data_.train.empty()) throw ContractError("train: training set is empty");
    if (loader_.batches_per_epoch() == 0)
      throw ConfigError("train.batch_size exceeds the training set size (" + std::to_string(data_.train.size()) + ")");
    vocab_ = build_vocab(data_.train, s_.text_aug.synonyms, s_.model.text.vocab_size);
    schedule_ = LrSchedule::from(s_.train, loader_.batches_per_epoch());
    const std::size_t image_size = s_.model.image_size();
    for (const auto& r : data_.train) train_images_.push_back(load_image(r, image_size));
    for (const auto& r : data_.val) {
      if (!r.label) throw ContractError("validation record " + r.image_ref + " has no label");
      if (*r.label >= data_.class_names.size()) throw IndexError("validation label out of range");
      val_images_.push_back(load_image(r, image_size));
      val_labels_.push_back(*r.label);
    }
    if (needs_of(s_.train.variant).queue) state_.queue.emplace(s_.loss.nn_queue_capacity, s_.model.text.embed_dim);
    if (!s_.resume_from.empty()) resume(load_checkpoint(s_.resume_from));
  }

  ClipModel& model() { return model_; }
  const Vocab& vocab() const { return vocab_; }
  const LrSchedule& schedule() const { return schedule_; }
  const TrainState& state() const { return state_; }
  std::size_t steps_per_epoch() const { return loader_.batches_per_epoch(); }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = s_.model.to_kv();
    ck.config.emplace_back("train.variant", to_string(s_.train.variant));
    ck.config.emplace_back("train.seed", std::to_string(s_.train.seed));
    ck.config.emplace_back("data.classes", join_names(data_.class_names));
    ck.config.emplace_back("vocab.words", vocab_.words_line());
    for (const auto& kv : s_.extra_config) ck.config.push_back(kv);
    ck.params = snapshot_params(model_.params());
    ck.blocks.push_back(encode_progress(state_));
    ck.blocks.push_back(encode_adam(state_.adam));
    if (state_.queue) ck.blocks.push_back(encode_queue(*state_.queue));
    return ck;
  }

  double evaluate() const {
    if (val_images_.empty()) return -1.0;
    const ClassifierMatrix c = build_classifier(data_.class_names, s_.prompts, model_, vocab_);
    return top1_accuracy(classify(val_images_, c, model_), val_labels_);
  }

  // One optimizer step on the batch `indices`; returns the breakdown.
  LossBreakdown step(const std::vector<std::size_t>& indices, std::uint64_t step) {
    const auto& seed = s_.train.seed;
    const Variant v = s_.train.variant;
    const VariantNeeds need = needs_of(v);
    const std::size_t L = s_.model.text.context_length;

    std::vector<const Image*> main;
    std::vector<Image> view_a, view_b;
    std::vector<TokenizedText> texts, texts_aug;
    for (std::size_t n = 0; n < indices.size(); ++n) {
      const std::size_t i = indices[n];
      main.push_back(&train_images_[i]);
      const auto words = split_words(data_.train[i].caption);
      texts.push_back(tokenize_words(words, vocab_, L));
      if (need.image_views) {
        view_a.push_back(augment_image(train_images_[i], s_.image_aug, derive_seed(seed, 0x76696577ULL, step, n, 0)));
        view_b.push_back(augment_image(train_images_[i], s_.image_aug, derive_seed(seed, 0x76696577ULL, step, n, 1)));
      }
      if (need.text_aug)
        texts_aug.push_back(
            tokenize_words(augment_text(words, s_.text_aug, derive_seed(seed, 0x74657874ULL, step, n)), vocab_, L));
    }

    const TokenBatch tokens = make_token_batch(texts);
    const EmbeddingBatch img = model_.encode_image(stack_images(main));
    const EmbeddingBatch txt = model_.encode_text(tokens);
    std::optional<EmbeddingBatch> va, vb, ta;
    SupervisionInputs in;
    in.image = &img;
    in.text = &txt;
    in.step = step;
    in.temperature = model_.temperature();
    if (need.image_views) {
      auto ptrs = [](const std::vector<Image>& xs) {
        std::vector<const Image*> p;
        for (const auto& x : xs) p.push_back(&x);
        return p;
      };
      va = model_.encode_image(stack_images(ptrs(view_a)));
      vb = model_.encode_image(stack_images(ptrs(view_b)));
      in.image_view_a = &*va;
      in.image_view_b = &*vb;
    }
    if (need.text_aug) {
      ta = model_.encode_text(make_token_batch(texts_aug));
      in.text_aug = &*ta;
    }
    if (need.tss) {
      const MaskedTokens masked =
          mask_for_mlm(tokens, s_.model.text.vocab_size, derive_seed(seed, 0x6d6c6dULL, step));
      in.tss = tss_loss(masked, model_.text_encoder(), model_.mlm_head());
    }
    if (need.queue) in.queue = &*state_.queue;

    CompositionStats stats;
    LossBreakdown b = compute_loss(v, in, s_.loss, &stats);
    nns_skipped_ += stats.nns_skipped;
    if (!std::isfinite(b.total.item()))
      throw NonFiniteError("loss is not finite at step " + std::to_string(step) + "; last good checkpoint: " +
                           last_good_);
    for (const auto& w : b.warnings)
      if (std::find(warnings_.begin(), warnings_.end(), w) == warnings_.end()) warnings_.push_back(w);

    model_.params().zero_grad();
    backward(b.total);
    adamw_step(model_.params(), state_.adam, lr_at(step, schedule_), AdamWConfig::from(s_.train));
    model_.clamp_temperature();
    if (need.queue) state_.queue->push(txt.pooled.data(), step);
    return b;
  }

  TrainResult run() {
    namespace fs = std::filesystem;
    if (s_.out_dir.empty()) throw ConfigError("train: output directory not set");
    fs::create_directories(s_.out_dir);
    const std::string dir = s_.out_dir + "/";
    // A resumed run continues the log it was checkpointed from.
    std::ofstream log(dir + "metrics.log", state_.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open " + dir + "metrics.log");

    TrainResult res;
    if (state_.step == 0) {
      save_checkpoint(dir + "initial.ckpt", checkpoint());
      last_good_ = dir + "initial.ckpt";
    } else {
      last_good_ = s_.resume_from;
    }
    const std::size_t spe = steps_per_epoch();
    const std::uint64_t total = schedule_.total_steps;
    std::uint64_t cached_epoch = ~0ULL;
    std::vector<std::vector<std::size_t>> order;
    std::size_t stepped = 0;

    while (state_.step < total) {
      if (s_.train.stop_after_steps && stepped == s_.train.stop_after_steps) {
        res.stopped_early = true;
        break;
      }
      const std::uint64_t step = state_.step;
      const std::uint64_t epoch = step / spe;
      if (epoch != cached_epoch) {
        order = loader_.epoch_indices(epoch);
        cached_epoch = epoch;
      }
      const double lr = lr_at(step, schedule_);
      const double tau = model_.temperature_value();
      const LossBreakdown b = this->step(order[step % spe], step);
      ++state_.step;
      ++stepped;
      log << format_breakdown(step, epoch, lr, tau, b) << "\n";
      if (s_.progress && (step % spe == 0 || step + 1 == total))
        *s_.progress << format_breakdown(step, epoch, lr, tau, b) << "\n";

      if (state_.step % spe == 0) {
        const double acc = evaluate();
        res.epoch_accuracy.push_back(acc);
        char buf[96];
        std::snprintf(buf, sizeof buf, "epoch=%llu step=%llu val_top1=%.6f", static_cast<unsigned long long>(epoch + 1),
                      static_cast<unsigned long long>(state_.step), acc);
        log << buf << "\n";
        log.flush();
        if (s_.progress) *s_.progress << buf << "\n";
        const bool improved = acc > state_.best_accuracy;
        if (improved) state_.best_accuracy = acc;
        save_checkpoint(dir + "last.ckpt", checkpoint());
        last_good_ = dir + "last.ckpt";
        if (improved) save_checkpoint(dir + "best.ckpt", checkpoint());
      }
    }
    if (res.stopped_early) {
      save_checkpoint(dir + "last.ckpt", checkpoint());
    } else if (total > 0) {
      save_checkpoint(dir + "final.ckpt", checkpoint());
    }
    log.flush();
    res.steps = state_.step;
    res.best_accuracy = state_.best_accuracy;
    res.final_accuracy = res.epoch_accuracy.empty() ? -1.0 : res.epoch_accuracy.back();
    res.nns_skipped = nns_skipped_;
    res.warnings = warnings_;
    return res;
  }

 private:
  static const ModelConfig& validated(const TrainSetup& s) {
    s.model.validate();
    s.train.validate();
    s.loss.validate(s.train.variant);
    s.image_aug.validate();
    s.text_aug.validate();
    return s.model;
  }

  void resume(const Checkpoint& ck) {
    const ModelConfig stored = model_config_from(ck.config);
    if (!(stored == s_.model)) throw ArtifactMismatchError("resume: checkpoint model config differs from the run config");
    const std::string* variant = ck.config_value("train.variant");
    if (!variant || *variant != to_string(s_.train.variant))
      throw ArtifactMismatchError("resume: checkpoint was trained with a different variant");
    const std::string* words = ck.config_value("vocab.words");
    if (!words || *words != vocab_.words_line()) throw ArtifactMismatchError("resume: vocabulary differs");
    restore_params(model_.params(), ck.params);
    const ExtensionBlock* progress = ck.block("TRST");
    const ExtensionBlock* adam = ck.block("ADAM");
    if (!progress || !adam) throw ArtifactMismatchError("resume: checkpoint lacks training state");
    decode_progress(*progress, state_);
    state_.adam = decode_adam(*adam);
    if (!state_.adam.m.empty() && state_.adam.m.size() != model_.params().size())
      throw ArtifactMismatchError("resume: optimizer state does not match parameters");
    if (state_.queue) {
      const ExtensionBlock* q = ck.block("NNQU");
      if (!q) throw ArtifactMismatchError("resume: checkpoint lacks the nearest-neighbour queue");
      state_.queue = decode_queue(*q);
    }
  }

  TrainSetup s_;
  const TrainingData& data_;
  ClipModel model_;
  PairLoader loader_;
  Vocab vocab_;
  LrSchedule schedule_;
  TrainState state_;
  std::vector<Image> train_images_, val_images_;
  std::vector<std::size_t> val_labels_;
  std::size_t nns_skipped_ = 0;
  std::vector<std::string> warnings_;
  std::string last_good_;
};

inline TrainResult train(TrainSetup setup, const TrainingData& data) {
  Trainer t(std::move(setup), data);
  return t.run();
}

// Model plus vocabulary and class names restored from a checkpoint.
struct LoadedModel {
  std::unique_ptr<ClipModel> model;
  Vocab vocab;
  std::vector<std::string> class_names;
  Checkpoint checkpoint;
};

inline LoadedModel load_model(const std::string& path) {
  LoadedModel m;
  m.checkpoint = load_checkpoint(path);
  const ModelConfig cfg = model_config_from(m.checkpoint.config);
  m.model = std::make_unique<ClipModel>(cfg, 0);
  restore_params(m.model->params(), m.checkpoint.params);
  const std::string* words = m.checkpoint.config_value("vocab.words");
  if (!words) throw ArtifactMismatchError(path + ": checkpoint has no vocabulary");
  m.vocab = Vocab::from_words(*words);
  if (m.vocab.size() > cfg.text.vocab_size) throw ArtifactMismatchError(path + ": vocabulary exceeds text.vocab_size");
  if (const std::string* classes = m.checkpoint.config_value("data.classes")) m.class_names = split_names(*classes);
  return m;
}

}  // namespace clipbench
