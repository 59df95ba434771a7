#pragma once

// Word-level tokenizer, paired-record manifests, farbfeld image I/O and the
// procedural shapes-on-noise dataset used for end-to-end checks.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clipbench/error.hpp"
#include "clipbench/rng.hpp"
#include "clipbench/tensor.hpp"
#include "clipbench/tokens.hpp"

namespace clipbench {

// ---------------------------------------------------------------- tokenizer

// Lowercases ASCII letters, splits on whitespace, and emits each ASCII
// punctuation character as its own token. Non-ASCII bytes stay inside words.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  Vocab() {
    for (const char* s : {"<pad>", "<start>", "<end>", "<mask>", "<unk>"}) push(s);
  }

  // Most frequent words first (ties alphabetical), capped so the vocabulary
  // including reserved ids has at most `max_size` entries.
  static Vocab build(const std::vector<std::vector<std::string>>& corpora, std::size_t max_size) {
    std::map<std::string, std::size_t> freq;
    for (const auto& words : corpora)
      for (const auto& w : words) ++freq[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [w, n] : ranked) {
      if (v.size() >= max_size) break;
      v.push(w);
    }
    return v;
  }

  // Inverse of words_line().
  static Vocab from_words(const std::string& line) {
    Vocab v;
    std::istringstream is(line);
    std::string w;
    while (is >> w) {
      if (v.index_.count(w)) throw ArtifactMismatchError("vocabulary lists '" + w + "' twice");
      v.push(w);
    }
    return v;
  }

  // Non-reserved words separated by single spaces.
  std::string words_line() const {
    std::string s;
    for (std::size_t i = special::kCount; i < words_.size(); ++i) s += (i > special::kCount ? " " : "") + words_[i];
    return s;
  }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? special::kUnk : it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }

 private:
  void push(const std::string& w) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct TokenizedText {
  std::vector<int> ids;              // exactly context_length entries
  std::vector<std::uint8_t> valid;   // 1 for non-padding
};

// [start, words..., end, pad...]; long inputs are truncated so the end token
// always occupies a position.
inline TokenizedText tokenize_words(const std::vector<std::string>& words, const Vocab& vocab,
                                    std::size_t context_length) {
  if (context_length < 2) throw ContractError("tokenize: context length must be at least 2");
  TokenizedText t;
  t.ids.reserve(context_length);
  t.ids.push_back(special::kStart);
  const std::size_t room = context_length - 2;
  for (std::size_t i = 0; i < words.size() && i < room; ++i) t.ids.push_back(vocab.id(words[i]));
  t.ids.push_back(special::kEnd);
  t.valid.assign(t.ids.size(), 1);
  t.ids.resize(context_length, special::kPad);
  t.valid.resize(context_length, 0);
  return t;
}

inline TokenizedText tokenize(std::string_view text, const Vocab& vocab, std::size_t context_length) {
  return tokenize_words(split_words(text), vocab, context_length);
}

inline std::vector<std::string> detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::vector<std::string> out;
  for (int id : ids)
    if (id >= special::kCount || id == special::kUnk || id == special::kMask) out.push_back(vocab.word(id));
  return out;
}

// Stacks tokenized captions; the batch is trimmed to its longest sequence.
inline TokenBatch make_token_batch(const std::vector<TokenizedText>& texts) {
  TokenBatch b;
  b.batch = texts.size();
  for (const auto& t : texts) {
    std::size_t len = 0;
    for (std::size_t i = 0; i < t.valid.size(); ++i)
      if (t.valid[i]) len = i + 1;
    b.length = std::max(b.length, len);
  }
  b.ids.reserve(b.batch * b.length);
  b.valid.reserve(b.batch * b.length);
  for (const auto& t : texts) {
    b.ids.insert(b.ids.end(), t.ids.begin(), t.ids.begin() + static_cast<long>(b.length));
    b.valid.insert(b.valid.end(), t.valid.begin(), t.valid.begin() + static_cast<long>(b.length));
  }
  return b;
}

// -------------------------------------------------------------------- images

// Channel-major RGB image with values in [0, 1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;  // [3 x height x width]

  static constexpr std::size_t kChannels = 3;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(kChannels * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

inline Tensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("stack_images: empty batch");
  const std::size_t H = images[0]->height, W = images[0]->width;
  std::vector<double> data;
  data.reserve(images.size() * Image::kChannels * H * W);
  for (const Image* im : images) {
    if (im->height != H || im->width != W) throw ShapeError("stack_images: images differ in size");
    data.insert(data.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor({images.size(), Image::kChannels, H, W}, std::move(data));
}

namespace farbfeld {

inline constexpr std::array<char, 8> kMagic{'f', 'a', 'r', 'b', 'f', 'e', 'l', 'd'};

inline void write(const std::string& path, const Image& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kMagic.data(), kMagic.size());
  auto be32 = [&](std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    os.write(b, 4);
  };
  be32(static_cast<std::uint32_t>(im.width));
  be32(static_cast<std::uint32_t>(im.height));
  for (std::size_t y = 0; y < im.height; ++y)
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < 4; ++c) {
        const double v = c < 3 ? std::clamp(im.at(c, y, x), 0.0, 1.0) : 1.0;
        const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
        const char b[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
        os.write(b, 2);
      }
  if (!os) throw IoError("write failed for " + path);
}

inline Image read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image " + path);
  std::array<char, 8> magic{};
  unsigned char hdr[8];
  is.read(magic.data(), 8);
  is.read(reinterpret_cast<char*>(hdr), 8);
  if (!is || magic != kMagic) throw IoError(path + ": not a farbfeld image");
  auto be32 = [&](const unsigned char* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
  };
  Image im(be32(hdr + 4), be32(hdr));
  std::vector<unsigned char> buf(im.width * im.height * 8);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw IoError(path + ": truncated pixel data");
  for (std::size_t y = 0; y < im.height; ++y)
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t off = ((y * im.width + x) * 4 + c) * 2;
        im.at(c, y, x) = static_cast<double>((buf[off] << 8) | buf[off + 1]) / 65535.0;
      }
  return im;
}

}  // namespace farbfeld

// --------------------------------------------------------- synthetic shapes

enum class ShapeKind { Circle, Square, Triangle, Cross };

inline constexpr std::array<const char*, 4> kShapeNames{"circle", "square", "triangle", "cross"};

struct ColorFamily {
  const char* name;
  std::array<double, 3> rgb;
};

inline constexpr std::array<ColorFamily, 8> kColors{{
    {"red", {0.90, 0.10, 0.10}},
    {"green", {0.10, 0.80, 0.15}},
    {"blue", {0.10, 0.20, 0.95}},
    {"yellow", {0.95, 0.90, 0.10}},
    {"purple", {0.60, 0.10, 0.80}},
    {"orange", {1.00, 0.55, 0.00}},
    {"white", {0.95, 0.95, 0.95}},
    {"cyan", {0.10, 0.85, 0.85}},
}};

inline constexpr std::size_t kMaxSyntheticClasses = kColors.size() * kShapeNames.size();

inline std::size_t class_color(std::size_t k) { return k % kColors.size(); }
inline std::size_t class_shape(std::size_t k) { return (k + k / kColors.size()) % kShapeNames.size(); }

inline std::string synthetic_class_name(std::size_t k) {
  return std::string(kColors[class_color(k)].name) + " " + kShapeNames[class_shape(k)];
}

inline constexpr std::array<const char*, 6> kCaptionTemplates{
    "a photo of a {label}.",
    "a picture of a {label} on a noisy background.",
    "a close-up photo of the {label}.",
    "an image of a {label}.",
    "a {label} in the middle of the frame.",
    "a small {label} drawn on noise.",
};

inline std::string fill_label(std::string_view tmpl, const std::string& label) {
  std::string s(tmpl);
  const auto pos = s.find("{label}");
  if (pos != std::string::npos) s.replace(pos, 7, label);
  return s;
}

// Everything needed to re-render one synthetic image deterministically.
struct SyntheticSpec {
  std::size_t class_id = 0;
  ShapeKind shape = ShapeKind::Circle;
  std::size_t color = 0;
  int cx = 16, cy = 16, radius = 8;
  std::uint64_t noise_seed = 0;
  std::size_t template_id = 0;

  static constexpr std::string_view kPrefix = "synthetic:";

  std::string to_string() const {
    std::ostringstream os;
    os << kPrefix << "class=" << class_id << ",shape=" << kShapeNames[static_cast<std::size_t>(shape)]
       << ",color=" << kColors[color].name << ",x=" << cx << ",y=" << cy << ",r=" << radius
       << ",noise=" << noise_seed << ",tpl=" << template_id;
    return os.str();
  }

  static bool is_synthetic(std::string_view ref) { return ref.substr(0, kPrefix.size()) == kPrefix; }

  static SyntheticSpec parse(std::string_view ref) {
    if (!is_synthetic(ref)) throw IoError("not a synthetic image reference: " + std::string(ref));
    SyntheticSpec s;
    std::stringstream ss{std::string(ref.substr(kPrefix.size()))};
    std::string field;
    int seen = 0;
    while (std::getline(ss, field, ',')) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw IoError("malformed synthetic field '" + field + "'");
      const std::string k = field.substr(0, eq), v = field.substr(eq + 1);
      try {
        if (k == "class") s.class_id = std::stoul(v);
        else if (k == "shape") {
          auto it = std::find(kShapeNames.begin(), kShapeNames.end(), v);
          if (it == kShapeNames.end()) throw IoError("unknown shape '" + v + "'");
          s.shape = static_cast<ShapeKind>(it - kShapeNames.begin());
        } else if (k == "color") {
          auto it = std::find_if(kColors.begin(), kColors.end(), [&](const auto& c) { return v == c.name; });
          if (it == kColors.end()) throw IoError("unknown color '" + v + "'");
          s.color = static_cast<std::size_t>(it - kColors.begin());
        } else if (k == "x") s.cx = std::stoi(v);
        else if (k == "y") s.cy = std::stoi(v);
        else if (k == "r") s.radius = std::stoi(v);
        else if (k == "noise") s.noise_seed = std::stoull(v);
        else if (k == "tpl") s.template_id = std::stoul(v);
        else throw IoError("unknown synthetic field '" + k + "'");
      } catch (const std::logic_error&) {
        throw IoError("malformed synthetic field '" + field + "'");
      }
      ++seen;
    }
    if (seen != 8) throw IoError("synthetic reference needs 8 fields: " + std::string(ref));
    return s;
  }

  std::string caption() const {
    return fill_label(kCaptionTemplates[template_id % kCaptionTemplates.size()], synthetic_class_name(class_id));
  }
};

inline bool inside_shape(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::Triangle:  // apex up, base at dy = +r
      return dy <= r && dy >= -r && std::abs(dx) <= (dy + r) * 0.5;
    case ShapeKind::Cross: return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
  }
  return false;
}

// Colored shape over per-channel uniform noise in [0, 0.35].
inline Image render_synthetic(const SyntheticSpec& s, std::size_t size) {
  Image im(size, size);
  Rng rng(s.noise_seed);
  for (auto& v : im.pixels) v = rng.uniform(0.0, 0.35);
  std::array<double, 3> rgb = kColors[s.color].rgb;
  for (auto& c : rgb) c = std::clamp(c + rng.uniform(-0.08, 0.08), 0.0, 1.0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - s.cx, dy = static_cast<double>(y) - s.cy;
      if (inside_shape(s.shape, dx, dy, s.radius))
        for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = rgb[c];
    }
  return im;
}

struct PairRecord {
  std::string image_ref;  // file path or synthetic:<spec>
  std::string caption;
  std::optional<std::size_t> label;
};

struct SyntheticDataset {
  std::vector<PairRecord> records;
  std::vector<std::string> class_names;
};

// K classes x n records, class-major order. Every record is reproducible
// from its spec string alone.
inline SyntheticDataset generate_synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                                           std::size_t image_size = 32) {
  if (classes < 2) throw ContractError("generate_synthetic: need at least 2 classes");
  if (classes > kMaxSyntheticClasses)
    throw ContractError("generate_synthetic: at most " + std::to_string(kMaxSyntheticClasses) + " classes");
  SyntheticDataset ds;
  for (std::size_t k = 0; k < classes; ++k) ds.class_names.push_back(synthetic_class_name(k));
  Rng rng(derive_seed(seed, 0x73796e7468ULL));
  const double unit = static_cast<double>(image_size) / 32.0;
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      SyntheticSpec s;
      s.class_id = k;
      s.shape = static_cast<ShapeKind>(class_shape(k));
      s.color = class_color(k);
      s.radius = static_cast<int>(std::lround(unit * rng.uniform(6.0, 10.0)));
      const double margin = s.radius + 1.0;
      s.cx = static_cast<int>(std::lround(rng.uniform(margin, static_cast<double>(image_size) - margin)));
      s.cy = static_cast<int>(std::lround(rng.uniform(margin, static_cast<double>(image_size) - margin)));
      s.noise_seed = rng.next_u64() >> 1;
      s.template_id = rng.index(kCaptionTemplates.size());
      ds.records.push_back({s.to_string(), s.caption(), k});
    }
  return ds;
}

inline Image load_image(const PairRecord& r, std::size_t image_size) {
  Image im = SyntheticSpec::is_synthetic(r.image_ref) ? render_synthetic(SyntheticSpec::parse(r.image_ref), image_size)
                                                     : farbfeld::read(r.image_ref);
  if (im.height != image_size || im.width != image_size)
    throw ArtifactMismatchError("image " + r.image_ref + " is " + std::to_string(im.width) + "x" +
                                std::to_string(im.height) + ", model expects " + std::to_string(image_size));
  return im;
}

// ------------------------------------------------------------------ manifest

// Lines: image_ref<TAB>caption[<TAB>label]. Synthetic references carry their
// label; blank lines are ignored.
inline std::vector<PairRecord> read_manifest(std::istream& is, const std::string& name = "manifest") {
  std::vector<PairRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 2 || cols.size() > 3 || cols[0].empty())
      throw IoError(name + ": expected image<TAB>caption[<TAB>label]", lineno);
    PairRecord r{cols[0], cols[1], std::nullopt};
    if (split_words(r.caption).empty()) throw IoError(name + ": empty caption", lineno);
    try {
      if (cols.size() == 3) {
        std::size_t used = 0;
        r.label = std::stoul(cols[2], &used);
        if (used != cols[2].size()) throw IoError("bad label");
      } else if (SyntheticSpec::is_synthetic(r.image_ref)) {
        r.label = SyntheticSpec::parse(r.image_ref).class_id;
      }
    } catch (const std::exception& e) {
      throw IoError(name + ": " + e.what(), lineno);
    }
    out.push_back(std::move(r));
  }
  if (is.bad()) throw IoError(name + ": read failure", lineno);
  return out;
}

inline std::vector<PairRecord> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path);
  return read_manifest(is, path);
}

inline void write_manifest(const std::string& path, const std::vector<PairRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& r : records) {
    os << r.image_ref << '\t' << r.caption;
    if (r.label && !SyntheticSpec::is_synthetic(r.image_ref)) os << '\t' << *r.label;
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<std::string> read_lines(const std::string& path, const char* what) {
  std::ifstream is(path);
  if (!is) throw IoError(std::string("cannot open ") + what + " " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// Seeded per-epoch shuffles with the final partial batch dropped.
class PairLoader {
 public:
  PairLoader(std::vector<PairRecord> records, std::size_t batch_size, std::uint64_t seed)
      : records_(std::move(records)), batch_size_(batch_size), seed_(seed) {
    if (!batch_size_) throw ContractError("PairLoader: batch size must be positive");
  }

  std::size_t batches_per_epoch() const { return records_.size() / batch_size_; }
  const std::vector<PairRecord>& records() const { return records_; }

  // Record indices for every full batch of `epoch`.
  std::vector<std::vector<std::size_t>> epoch_indices(std::uint64_t epoch) const {
    std::vector<std::size_t> order(records_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed_, 0x65706f6368ULL, epoch));
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < batches_per_epoch(); ++b)
      out.emplace_back(order.begin() + static_cast<long>(b * batch_size_),
                       order.begin() + static_cast<long>((b + 1) * batch_size_));
    return out;
  }

  std::vector<std::vector<PairRecord>> epoch(std::uint64_t e) const {
    std::vector<std::vector<PairRecord>> out;
    for (const auto& idx : epoch_indices(e)) {
      auto& batch = out.emplace_back();
      for (auto i : idx) batch.push_back(records_[i]);
    }
    return out;
  }

 private:
  std::vector<PairRecord> records_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

inline PairLoader load_pairs(const std::string& manifest, std::size_t batch_size, std::uint64_t seed) {
  return PairLoader(read_manifest(manifest), batch_size, seed);
}

}  // namespace clipbench
