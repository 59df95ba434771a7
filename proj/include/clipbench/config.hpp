#pragma once

// Run configuration: INI-style sections of key = value pairs, command-line
// overrides of the form section.key=value, and a resolved dump.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "clipbench/augment.hpp"
#include "clipbench/encoders.hpp"
#include "clipbench/error.hpp"
#include "clipbench/supervision.hpp"
#include "clipbench/trainer.hpp"

namespace clipbench {

struct DataPaths {
  std::string train_manifest;
  std::string val_manifest;
  std::string classes;   // one class name per line, index = label
  std::string synonyms;  // optional
  std::string prompts;   // optional, defaults to the built-in set
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  ImageAugPolicy image_aug;
  double text_rate = 0.1;
  bool synonym_replacement = true, random_swap = true, random_deletion = true;
  DataPaths data;
  std::string out_dir = "runs/default";
  std::string resume_from;

  // Per-flag overrides on top of the variant's preset.
  std::map<std::string, bool> loss_flags;

  // Returns false for unknown keys.
  bool set(const std::string& key, const std::string& v) {
    using namespace kv;
    if (model.set(key, v)) return true;
    auto boolean = [&](const std::string& k) {
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      throw ConfigError(k + ": expected true or false, got '" + v + "'");
    };
    if (key == "train.epochs") train.epochs = parse_size(key, v);
    else if (key == "train.batch_size") train.batch_size = parse_size(key, v);
    else if (key == "train.base_lr") train.base_lr = parse_double(key, v);
    else if (key == "train.peak_lr") train.peak_lr = parse_double(key, v);
    else if (key == "train.warmup_epochs") train.warmup_epochs = parse_double(key, v);
    else if (key == "train.weight_decay") train.weight_decay = parse_double(key, v);
    else if (key == "train.beta1") train.beta1 = parse_double(key, v);
    else if (key == "train.beta2") train.beta2 = parse_double(key, v);
    else if (key == "train.eps") train.eps = parse_double(key, v);
    else if (key == "train.seed") train.seed = parse_size(key, v);
    else if (key == "train.stop_after_steps") train.stop_after_steps = parse_size(key, v);
    else if (key == "train.resume_from") resume_from = v;
    else if (key == "train.variant") {
      auto var = parse_variant(v);
      if (!var) throw ConfigError("unknown variant '" + v + "'; valid variants: " + kVariantNames);
      train.variant = *var;
    } else if (key == "loss.use_clip" || key == "loss.use_iss" || key == "loss.use_tss" || key == "loss.use_mvs" ||
               key == "loss.use_nns" || key == "loss.use_fas")
      loss_flags[key] = boolean(key);
    else if (key == "loss.alpha_slip") loss.alpha_slip = parse_double(key, v);
    else if (key == "loss.alpha") loss.alpha = parse_double(key, v);
    else if (key == "loss.beta") loss.beta = parse_double(key, v);
    else if (key == "loss.gamma") loss.gamma = parse_double(key, v);
    else if (key == "loss.lambda") loss.lambda = parse_double(key, v);
    else if (key == "loss.ssl_temperature") loss.ssl_temperature = parse_double(key, v);
    else if (key == "loss.filip_token_fraction") loss.filip_token_fraction = parse_double(key, v);
    else if (key == "loss.nn_queue_capacity") loss.nn_queue_capacity = parse_size(key, v);
    else if (key == "augment.crop_scale_min") image_aug.crop_scale_min = parse_double(key, v);
    else if (key == "augment.crop_scale_max") image_aug.crop_scale_max = parse_double(key, v);
    else if (key == "augment.brightness") image_aug.brightness = parse_double(key, v);
    else if (key == "augment.contrast") image_aug.contrast = parse_double(key, v);
    else if (key == "augment.saturation") image_aug.saturation = parse_double(key, v);
    else if (key == "augment.hue") image_aug.hue = parse_double(key, v);
    else if (key == "augment.jitter_probability") image_aug.jitter_probability = parse_double(key, v);
    else if (key == "augment.grayscale_probability") image_aug.grayscale_probability = parse_double(key, v);
    else if (key == "augment.blur_probability") image_aug.blur_probability = parse_double(key, v);
    else if (key == "augment.blur_sigma_min") image_aug.blur_sigma_min = parse_double(key, v);
    else if (key == "augment.blur_sigma_max") image_aug.blur_sigma_max = parse_double(key, v);
    else if (key == "augment.flip_probability") image_aug.flip_probability = parse_double(key, v);
    else if (key == "augment.text_rate") text_rate = parse_double(key, v);
    else if (key == "augment.synonym_replacement") synonym_replacement = boolean(key);
    else if (key == "augment.random_swap") random_swap = boolean(key);
    else if (key == "augment.random_deletion") random_deletion = boolean(key);
    else if (key == "data.train_manifest") data.train_manifest = v;
    else if (key == "data.val_manifest") data.val_manifest = v;
    else if (key == "data.classes") data.classes = v;
    else if (key == "data.synonyms") data.synonyms = v;
    else if (key == "eval.prompts") data.prompts = v;
    else if (key == "output.dir") out_dir = v;
    else return false;
    return true;
  }

  void set_checked(const std::string& key, const std::string& v) {
    if (!set(key, v)) throw ConfigError("unknown config key '" + key + "'");
  }

  LossConfig resolved_loss() const {
    LossConfig l = loss;
    const LossConfig p = LossConfig::preset(train.variant);
    l.use_clip = p.use_clip;
    l.use_iss = p.use_iss;
    l.use_tss = p.use_tss;
    l.use_mvs = p.use_mvs;
    l.use_nns = p.use_nns;
    l.use_fas = p.use_fas;
    for (const auto& [k, b] : loss_flags) {
      if (k == "loss.use_clip") l.use_clip = b;
      else if (k == "loss.use_iss") l.use_iss = b;
      else if (k == "loss.use_tss") l.use_tss = b;
      else if (k == "loss.use_mvs") l.use_mvs = b;
      else if (k == "loss.use_nns") l.use_nns = b;
      else if (k == "loss.use_fas") l.use_fas = b;
    }
    return l;
  }

  TextAugPolicy text_policy() const {
    TextAugPolicy p;
    p.rate = text_rate;
    p.synonym_replacement = synonym_replacement;
    p.random_swap = random_swap;
    p.random_deletion = random_deletion;
    return p;
  }

  // Field-level checks that need no file access.
  void validate() const {
    model.validate();
    train.validate();
    resolved_loss().validate(train.variant);
    image_aug.validate();
    text_policy().validate();
    if (out_dir.empty()) throw ConfigError("output.dir must not be empty");
  }

  KeyValues to_kv() const {
    using kv::format_double;
    auto b = [](bool x) { return std::string(x ? "true" : "false"); };
    KeyValues out = model.to_kv();
    const LossConfig l = resolved_loss();
    const KeyValues rest = {
        {"train.epochs", std::to_string(train.epochs)},
        {"train.batch_size", std::to_string(train.batch_size)},
        {"train.base_lr", format_double(train.base_lr)},
        {"train.peak_lr", format_double(train.peak_lr)},
        {"train.warmup_epochs", format_double(train.warmup_epochs)},
        {"train.weight_decay", format_double(train.weight_decay)},
        {"train.beta1", format_double(train.beta1)},
        {"train.beta2", format_double(train.beta2)},
        {"train.eps", format_double(train.eps)},
        {"train.seed", std::to_string(train.seed)},
        {"train.variant", to_string(train.variant)},
        {"train.stop_after_steps", std::to_string(train.stop_after_steps)},
        {"train.resume_from", resume_from},
        {"loss.use_clip", b(l.use_clip)},
        {"loss.use_iss", b(l.use_iss)},
        {"loss.use_tss", b(l.use_tss)},
        {"loss.use_mvs", b(l.use_mvs)},
        {"loss.use_nns", b(l.use_nns)},
        {"loss.use_fas", b(l.use_fas)},
        {"loss.alpha_slip", format_double(l.alpha_slip)},
        {"loss.alpha", format_double(l.alpha)},
        {"loss.beta", format_double(l.beta)},
        {"loss.gamma", format_double(l.gamma)},
        {"loss.lambda", format_double(l.lambda)},
        {"loss.ssl_temperature", format_double(l.ssl_temperature)},
        {"loss.filip_token_fraction", format_double(l.filip_token_fraction)},
        {"loss.nn_queue_capacity", std::to_string(l.nn_queue_capacity)},
        {"augment.crop_scale_min", format_double(image_aug.crop_scale_min)},
        {"augment.crop_scale_max", format_double(image_aug.crop_scale_max)},
        {"augment.brightness", format_double(image_aug.brightness)},
        {"augment.contrast", format_double(image_aug.contrast)},
        {"augment.saturation", format_double(image_aug.saturation)},
        {"augment.hue", format_double(image_aug.hue)},
        {"augment.jitter_probability", format_double(image_aug.jitter_probability)},
        {"augment.grayscale_probability", format_double(image_aug.grayscale_probability)},
        {"augment.blur_probability", format_double(image_aug.blur_probability)},
        {"augment.blur_sigma_min", format_double(image_aug.blur_sigma_min)},
        {"augment.blur_sigma_max", format_double(image_aug.blur_sigma_max)},
        {"augment.flip_probability", format_double(image_aug.flip_probability)},
        {"augment.text_rate", format_double(text_rate)},
        {"augment.synonym_replacement", b(synonym_replacement)},
        {"augment.random_swap", b(random_swap)},
        {"augment.random_deletion", b(random_deletion)},
        {"data.train_manifest", data.train_manifest},
        {"data.val_manifest", data.val_manifest},
        {"data.classes", data.classes},
        {"data.synonyms", data.synonyms},
        {"eval.prompts", data.prompts},
        {"output.dir", out_dir},
    };
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
  }
};

// Flattened (section.key, value, line) entries of an INI document.
struct IniEntry {
  std::string key, value;
  std::size_t line = 0;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<IniEntry> parse_ini(std::istream& is, const std::string& name = "config") {
  std::vector<IniEntry> out;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw ConfigError(name + ":" + std::to_string(lineno) + ": bad section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(name + ":" + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError(name + ":" + std::to_string(lineno) + ": key outside of a section");
    out.push_back({section + "." + trim(t.substr(0, eq)), trim(t.substr(eq + 1)), lineno});
  }
  return out;
}

inline void apply_ini(RunConfig& cfg, std::istream& is, const std::string& name = "config") {
  for (const auto& e : parse_ini(is, name)) {
    try {
      cfg.set_checked(e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(name + ":" + std::to_string(e.line) + ": " + err.what());
    }
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  apply_ini(cfg, is, path);
  return cfg;
}

// "section.key=value"
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  cfg.set_checked(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

inline std::string to_ini(const KeyValues& kvs) {
  std::ostringstream os;
  std::string section;
  for (const auto& [k, v] : kvs) {
    const auto dot = k.find('.');
    const std::string s = k.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << "[" << s << "]\n";
      section = s;
    }
    os << k.substr(dot + 1) << " = " << v << "\n";
  }
  return os.str();
}

// Smaller encoders for quick runs on a single core.
// Smaller towers, and a lower peak LR: at batch 64 the 1e-3 peak often
// collapses both towers to a single embedding once the text encoder has 3+ layers.
inline void apply_light_preset(RunConfig& cfg) {
  for (const char* a : {"vit.patch_size=8", "vit.width=64", "vit.depth=2", "text.width=64", "text.depth=2",
                        "text.context_length=16", "train.peak_lr=3e-4"})
    apply_override(cfg, a);
}

}  // namespace clipbench
