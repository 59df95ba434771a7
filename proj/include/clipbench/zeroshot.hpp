#pragma once

// Prompt-ensembled zero-shot classifier and top-1 evaluation.

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "clipbench/data.hpp"
#include "clipbench/encoders.hpp"
#include "clipbench/error.hpp"

namespace clipbench {

inline constexpr std::string_view kLabelSlot = "{label}";

// Used when no prompt file is given. Every word here also appears in the
// synthetic captions.
inline const std::vector<std::string>& default_prompts() {
  static const std::vector<std::string> p{
      "a photo of a {label}.",      "a photo of the {label}.",       "a close-up photo of a {label}.",
      "a close-up photo of the {label}.", "a picture of a {label}.", "an image of a {label}.",
      "a small {label}.",
  };
  return p;
}

class PromptSet {
 public:
  explicit PromptSet(std::vector<std::string> templates) : templates_(std::move(templates)) {
    if (templates_.empty()) throw ConfigError("prompt set is empty");
    for (const auto& t : templates_) {
      const auto first = t.find(kLabelSlot);
      if (first == std::string::npos || t.find(kLabelSlot, first + 1) != std::string::npos)
        throw ConfigError("prompt template must contain {label} exactly once: '" + t + "'");
    }
  }

  static PromptSet defaults() { return PromptSet(default_prompts()); }
  static PromptSet load(const std::string& path) { return PromptSet(read_lines(path, "prompt file")); }

  const std::vector<std::string>& templates() const { return templates_; }
  std::size_t size() const { return templates_.size(); }
  std::string fill(std::size_t i, const std::string& label) const { return fill_label(templates_[i], label); }

 private:
  std::vector<std::string> templates_;
};

// K unit rows, one per class.
struct ClassifierMatrix {
  std::size_t classes = 0, dim = 0;
  std::vector<double> rows;

  std::span<const double> row(std::size_t k) const { return {rows.data() + k * dim, dim}; }
};

// Mean of the given rows, renormalized.
inline std::vector<double> mean_normalize(const std::vector<double>& rows, std::size_t count, std::size_t dim) {
  if (!count) throw ContractError("mean_normalize: no rows");
  std::vector<double> m(dim, 0.0);
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t d = 0; d < dim; ++d) m[d] += rows[r * dim + d];
  double ss = 0.0;
  for (auto& v : m) {
    v /= static_cast<double>(count);
    ss += v * v;
  }
  const double norm = std::sqrt(ss);
  if (norm < kMinNorm) throw DegenerateInputError("prompt embeddings average to zero");
  for (auto& v : m) v /= norm;
  return m;
}

inline ClassifierMatrix build_classifier(const std::vector<std::string>& class_names, const PromptSet& prompts,
                                         const ClipModel& model, const Vocab& vocab) {
  if (class_names.empty()) throw ContractError("build_classifier: no classes");
  const std::size_t L = model.config().text.context_length;
  ClassifierMatrix c;
  c.classes = class_names.size();
  c.dim = model.config().text.embed_dim;
  NoGradGuard no_grad;
  for (const auto& name : class_names) {
    if (split_words(name).empty()) throw ContractError("class name '" + name + "' has no tokens");
    std::vector<TokenizedText> texts;
    for (std::size_t t = 0; t < prompts.size(); ++t) texts.push_back(tokenize(prompts.fill(t, name), vocab, L));
    const EmbeddingBatch e = model.encode_text(make_token_batch(texts));
    const auto row = mean_normalize(e.pooled.values(), prompts.size(), c.dim);
    c.rows.insert(c.rows.end(), row.begin(), row.end());
  }
  return c;
}

// argmax_k <x, row_k>; ties go to the lower class id.
inline std::vector<std::size_t> classify_embeddings(std::span<const double> pooled, std::size_t count,
                                                    const ClassifierMatrix& c) {
  if (pooled.size() != count * c.dim) throw ShapeError("classify: embedding dimension does not match classifier");
  std::vector<std::size_t> out(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::size_t best = 0;
    double best_v = 0.0;
    for (std::size_t k = 0; k < c.classes; ++k) {
      double dot = 0.0;
      for (std::size_t d = 0; d < c.dim; ++d) dot += pooled[n * c.dim + d] * c.rows[k * c.dim + d];
      if (k == 0 || dot > best_v) {
        best = k;
        best_v = dot;
      }
    }
    out[n] = best;
  }
  return out;
}

inline std::vector<std::size_t> classify(const std::vector<Image>& images, const ClassifierMatrix& c,
                                         const ClipModel& model, std::size_t chunk = 64) {
  if (model.config().image_embed_dim() != c.dim) throw ShapeError("classify: classifier dimension mismatch");
  NoGradGuard no_grad;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    std::vector<const Image*> batch;
    for (std::size_t j = i; j < std::min(images.size(), i + chunk); ++j) batch.push_back(&images[j]);
    const EmbeddingBatch e = model.encode_image(stack_images(batch));
    const auto pred = classify_embeddings(e.pooled.data(), batch.size(), c);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

inline double top1_accuracy(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels) {
  if (predictions.empty()) throw ContractError("top1_accuracy: empty input");
  if (predictions.size() != labels.size()) throw ContractError("top1_accuracy: length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double accuracy = 0.0;

  std::size_t support(std::size_t k) const {
    std::size_t n = 0;
    for (auto v : confusion[k]) n += v;
    return n;
  }
  double class_accuracy(std::size_t k) const {
    const auto n = support(k);
    return n ? static_cast<double>(confusion[k][k]) / static_cast<double>(n) : 0.0;
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", accuracy);
    os << "top1_accuracy=" << buf << "\n";
    for (std::size_t k = 0; k < class_names.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.6f", class_accuracy(k));
      os << "class=" << k << " name=\"" << class_names[k] << "\" support=" << support(k) << " accuracy=" << buf
         << " predicted=";
      for (std::size_t j = 0; j < confusion[k].size(); ++j) os << (j ? "," : "") << confusion[k][j];
      os << "\n";
    }
    return os.str();
  }
};

inline EvalReport make_report(const std::vector<std::string>& class_names, const std::vector<std::size_t>& predictions,
                              const std::vector<std::size_t>& labels) {
  EvalReport r;
  r.class_names = class_names;
  r.accuracy = top1_accuracy(predictions, labels);
  r.confusion.assign(class_names.size(), std::vector<std::size_t>(class_names.size(), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_names.size() || predictions[i] >= class_names.size())
      throw IndexError("evaluation label out of range");
    ++r.confusion[labels[i]][predictions[i]];
  }
  return r;
}

}  // namespace clipbench
