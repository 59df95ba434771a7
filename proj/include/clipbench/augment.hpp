#pragma once

// Seeded image augmentation (crop/resize, color jitter, grayscale, blur,
// flip) and EDA-style caption augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "clipbench/data.hpp"
#include "clipbench/error.hpp"
#include "clipbench/rng.hpp"

namespace clipbench {

struct ImageAugPolicy {
  double crop_scale_min = 0.2, crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0, crop_ratio_max = 4.0 / 3.0;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1;
  double jitter_probability = 0.8;
  double grayscale_probability = 0.2;
  double blur_probability = 0.5;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  double flip_probability = 0.5;

  // Every branch off and the crop pinned to the whole image.
  static ImageAugPolicy identity() {
    ImageAugPolicy p;
    p.crop_scale_min = p.crop_scale_max = 1.0;
    p.crop_ratio_min = p.crop_ratio_max = 1.0;
    p.jitter_probability = p.grayscale_probability = p.blur_probability = p.flip_probability = 0.0;
    return p;
  }

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must be in [0,1]");
    };
    prob(jitter_probability, "jitter_probability");
    prob(grayscale_probability, "grayscale_probability");
    prob(blur_probability, "blur_probability");
    prob(flip_probability, "flip_probability");
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
      throw ConfigError("augment: crop scale range must lie within (0,1]");
    if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max)) throw ConfigError("augment: bad crop ratio range");
    if (brightness < 0 || contrast < 0 || saturation < 0) throw ConfigError("augment: jitter strengths must be >= 0");
    if (!(hue >= 0.0 && hue <= 0.5)) throw ConfigError("augment: hue strength must be in [0,0.5]");
    if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) throw ConfigError("augment: bad blur sigma range");
  }
};

namespace detail {

// Bilinear resample of the window [top, top+h) x [left, left+w) to out x out,
// pixel centers aligned half a pixel in.
inline Image resize_crop(const Image& im, std::size_t top, std::size_t left, std::size_t h, std::size_t w,
                         std::size_t out_h, std::size_t out_w) {
  Image out(out_h, out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        const double a = im.at(c, top + y0, left + x0), b = im.at(c, top + y0, left + x1);
        const double d = im.at(c, top + y1, left + x0), e = im.at(c, top + y1, left + x1);
        out.at(c, y, x) = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e);
      }
    }
  }
  return out;
}

inline Image random_resized_crop(const Image& im, const ImageAugPolicy& p, Rng& rng) {
  const std::size_t H = im.height, W = im.width;
  const double area = static_cast<double>(H * W);
  std::size_t h = H, w = W, top = 0, left = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(p.crop_scale_min, p.crop_scale_max);
    const double ratio = std::exp(rng.uniform(std::log(p.crop_ratio_min), std::log(p.crop_ratio_max)));
    const auto cw = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto ch = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (cw >= 1 && ch >= 1 && cw <= W && ch <= H) {
      w = cw;
      h = ch;
      top = rng.index(H - h + 1);
      left = rng.index(W - w + 1);
      found = true;
    }
  }
  if (h == H && w == W) return im;
  return resize_crop(im, top, left, h, w, H, W);
}

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline void clamp01(Image& im) {
  for (auto& v : im.pixels) v = std::clamp(v, 0.0, 1.0);
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d == 0) {
    h = 0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = (b - r) / d + 2.0;
  } else {
    h = (r - g) / d + 4.0;
  }
  h /= 6.0;
  if (h < 0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = h * 6.0;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

inline void color_jitter(Image& im, const ImageAugPolicy& p, Rng& rng) {
  const std::size_t n = im.height * im.width;
  double* r = im.pixels.data();
  double* g = r + n;
  double* b = g + n;
  const double fb = rng.uniform(std::max(0.0, 1 - p.brightness), 1 + p.brightness);
  const double fc = rng.uniform(std::max(0.0, 1 - p.contrast), 1 + p.contrast);
  const double fs = rng.uniform(std::max(0.0, 1 - p.saturation), 1 + p.saturation);
  const double fh = rng.uniform(-p.hue, p.hue);

  for (auto& v : im.pixels) v *= fb;
  clamp01(im);

  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += luma(r[i], g[i], b[i]);
  mean /= static_cast<double>(n);
  for (auto& v : im.pixels) v = (v - mean) * fc + mean;
  clamp01(im);

  for (std::size_t i = 0; i < n; ++i) {
    const double y = luma(r[i], g[i], b[i]);
    r[i] = (r[i] - y) * fs + y;
    g[i] = (g[i] - y) * fs + y;
    b[i] = (b[i] - y) * fs + y;
  }
  clamp01(im);

  if (fh != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double h, s, v;
      rgb_to_hsv(r[i], g[i], b[i], h, s, v);
      h = std::fmod(h + fh + 1.0, 1.0);
      hsv_to_rgb(h, s, v, r[i], g[i], b[i]);
    }
  }
}

inline void grayscale(Image& im) {
  const std::size_t n = im.height * im.width;
  double* r = im.pixels.data();
  double* g = r + n;
  double* b = g + n;
  for (std::size_t i = 0; i < n; ++i) r[i] = g[i] = b[i] = luma(r[i], g[i], b[i]);
}

// Kernel side: a tenth of the image side rounded, bumped to the next odd
// number, at least 3.
inline std::size_t blur_kernel_size(std::size_t image_side) {
  auto k = static_cast<std::size_t>(std::lround(static_cast<double>(image_side) / 10.0));
  if (k % 2 == 0) ++k;
  return std::max<std::size_t>(k, 3);
}

inline std::size_t reflect(long i, std::size_t n) {
  const long m = static_cast<long>(n);
  if (m == 1) return 0;
  while (i < 0 || i >= m) i = i < 0 ? -i : 2 * (m - 1) - i;
  return static_cast<std::size_t>(i);
}

inline void gaussian_blur(Image& im, double sigma) {
  const std::size_t k = blur_kernel_size(std::min(im.height, im.width));
  const long half = static_cast<long>(k / 2);
  std::vector<double> w(k);
  double total = 0;
  for (long i = -half; i <= half; ++i) total += w[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : w) v /= total;
  Image tmp = im;
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) {
        double acc = 0;
        for (long i = -half; i <= half; ++i)
          acc += w[static_cast<std::size_t>(i + half)] * im.at(c, y, reflect(static_cast<long>(x) + i, im.width));
        tmp.at(c, y, x) = acc;
      }
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) {
        double acc = 0;
        for (long i = -half; i <= half; ++i)
          acc += w[static_cast<std::size_t>(i + half)] * tmp.at(c, reflect(static_cast<long>(y) + i, im.height), x);
        im.at(c, y, x) = acc;
      }
}

inline void hflip(Image& im) {
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width / 2; ++x) std::swap(im.at(c, y, x), im.at(c, y, im.width - 1 - x));
}

}  // namespace detail

inline Image augment_image(const Image& image, const ImageAugPolicy& policy, std::uint64_t seed) {
  policy.validate();
  Rng rng(seed);
  Image out = detail::random_resized_crop(image, policy, rng);
  if (rng.bernoulli(policy.jitter_probability)) detail::color_jitter(out, policy, rng);
  if (rng.bernoulli(policy.grayscale_probability)) detail::grayscale(out);
  if (rng.bernoulli(policy.blur_probability))
    detail::gaussian_blur(out, rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max));
  if (rng.bernoulli(policy.flip_probability)) detail::hflip(out);
  detail::clamp01(out);
  return out;
}

// ---------------------------------------------------------------- text (EDA)

class SynonymTable {
 public:
  SynonymTable() = default;

  // `word<TAB>alt1,alt2,...` per line; blank lines and '#' comments ignored.
  static SynonymTable parse(std::istream& is, const std::string& name = "synonyms") {
    SynonymTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw IoError(name + ": expected word<TAB>alternatives", lineno);
      std::vector<std::string> alts;
      std::stringstream ss(line.substr(tab + 1));
      std::string alt;
      while (std::getline(ss, alt, ',')) alts.push_back(alt);
      try {
        t.add(line.substr(0, tab), alts);
      } catch (const ConfigError& e) {
        throw IoError(name + ": " + e.what(), lineno);
      }
    }
    return t;
  }

  static SynonymTable load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open synonym table " + path);
    return parse(is, path);
  }

  // Both the key and every alternative must survive tokenization unchanged
  // as a single token.
  void add(const std::string& word, const std::vector<std::string>& alternatives) {
    check_token(word);
    if (alternatives.empty()) throw ConfigError("synonym entry '" + word + "' has no alternatives");
    for (const auto& a : alternatives) check_token(a);
    auto& slot = table_[word];
    slot.insert(slot.end(), alternatives.begin(), alternatives.end());
  }

  const std::vector<std::string>* find(const std::string& word) const {
    auto it = table_.find(word);
    return it == table_.end() ? nullptr : &it->second;
  }

  bool empty() const { return table_.empty(); }

  // Keys and alternatives, for vocabulary construction.
  std::vector<std::string> words() const {
    std::vector<std::string> out;
    for (const auto& [k, alts] : table_) {
      out.push_back(k);
      out.insert(out.end(), alts.begin(), alts.end());
    }
    return out;
  }

 private:
  static void check_token(const std::string& w) {
    const auto parts = split_words(w);
    if (parts.size() != 1 || parts[0] != w) throw ConfigError("synonym '" + w + "' is not a single lowercase token");
  }
  std::map<std::string, std::vector<std::string>> table_;
};

enum class TextAugStrategy { SynonymReplacement, RandomSwap, RandomDeletion };

struct TextAugPolicy {
  bool synonym_replacement = true;
  bool random_swap = true;
  bool random_deletion = true;
  double rate = 0.1;
  SynonymTable synonyms;

  std::vector<TextAugStrategy> strategies() const {
    std::vector<TextAugStrategy> s;
    if (synonym_replacement) s.push_back(TextAugStrategy::SynonymReplacement);
    if (random_swap) s.push_back(TextAugStrategy::RandomSwap);
    if (random_deletion) s.push_back(TextAugStrategy::RandomDeletion);
    return s;
  }

  void validate() const {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("text augmentation rate must be in [0,1)");
  }
};

// Words at the given (sorted, unique) positions removed.
inline std::vector<std::string> delete_at(const std::vector<std::string>& words, const std::vector<std::size_t>& drop) {
  std::vector<std::string> out;
  std::size_t d = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (d < drop.size() && drop[d] == i) {
      ++d;
      continue;
    }
    out.push_back(words[i]);
  }
  return out;
}

// Words affected by one synonym/swap call.
inline std::size_t eda_count(double rate, std::size_t n) {
  if (rate == 0.0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rate * static_cast<double>(n))));
}

inline std::vector<std::string> apply_strategy(const std::vector<std::string>& words, TextAugStrategy s,
                                               const TextAugPolicy& p, Rng& rng) {
  std::vector<std::string> out = words;
  if (p.rate == 0.0) return out;
  switch (s) {
    case TextAugStrategy::SynonymReplacement: {
      std::vector<std::size_t> cand;
      for (std::size_t i = 0; i < out.size(); ++i)
        if (p.synonyms.find(out[i])) cand.push_back(i);
      rng.shuffle(cand.begin(), cand.end());
      const std::size_t n = std::min(cand.size(), eda_count(p.rate, out.size()));
      for (std::size_t k = 0; k < n; ++k) {
        const auto& alts = *p.synonyms.find(out[cand[k]]);
        out[cand[k]] = alts[rng.index(alts.size())];
      }
      break;
    }
    case TextAugStrategy::RandomSwap: {
      if (out.size() < 2) break;
      const std::size_t n = eda_count(p.rate, out.size());
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = rng.index(out.size());
        std::size_t j = rng.index(out.size() - 1);
        if (j >= i) ++j;
        std::swap(out[i], out[j]);
      }
      break;
    }
    case TextAugStrategy::RandomDeletion: {
      std::vector<std::size_t> drop;
      for (std::size_t i = 0; i < out.size(); ++i)
        if (rng.bernoulli(p.rate)) drop.push_back(i);
      if (drop.size() == out.size()) drop.pop_back();  // keep the final word
      out = delete_at(out, drop);
      break;
    }
  }
  return out;
}

// One uniformly chosen enabled strategy per call.
inline std::vector<std::string> augment_text(const std::vector<std::string>& words, const TextAugPolicy& policy,
                                             std::uint64_t seed) {
  if (words.empty()) throw ContractError("augment_text: caption has no tokens");
  policy.validate();
  const auto strategies = policy.strategies();
  if (strategies.empty()) return words;
  Rng rng(seed);
  const TextAugStrategy s = strategies[rng.index(strategies.size())];
  return apply_strategy(words, s, policy, rng);
}

}  // namespace clipbench
