#pragma once

// Streaming caption-corpus statistics (count, length mean/std, English-word
// ratio, unique tokens) and threshold filtering.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include "clipbench/data.hpp"
#include "clipbench/error.hpp"

namespace clipbench {

// Token made only of ASCII letters.
inline bool is_english_word(const std::string& token) {
  if (token.empty()) return false;
  for (unsigned char c : token)
    if (!((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'))) return false;
  return true;
}

struct CaptionStats {
  std::size_t tokens = 0;
  std::size_t english = 0;
  double ratio() const { return tokens ? static_cast<double>(english) / static_cast<double>(tokens) : 0.0; }
};

inline CaptionStats caption_stats(const std::vector<std::string>& words) {
  CaptionStats s;
  s.tokens = words.size();
  for (const auto& w : words) s.english += is_english_word(w);
  return s;
}

struct CorpusReport {
  std::uint64_t count = 0;
  double length_mean = 0.0;
  double length_std = 0.0;
  double english_ratio = 0.0;          // token-weighted
  double english_ratio_per_caption = 0.0;
  std::uint64_t unique_tokens = 0;
  std::uint64_t total_tokens = 0;

  std::string to_kv() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "examples=%llu\ncaption_length_mean=%.6f\ncaption_length_std=%.6f\nen_word_ratio=%.6f\n"
                  "en_word_ratio_per_caption=%.6f\nunique_tokens=%llu\ntotal_tokens=%llu\n",
                  static_cast<unsigned long long>(count), length_mean, length_std, english_ratio,
                  english_ratio_per_caption, static_cast<unsigned long long>(unique_tokens),
                  static_cast<unsigned long long>(total_tokens));
    return buf;
  }

  std::string to_text() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "  Examples                   %12llu\n"
                  "  Caption length (mean/std)  %12.3f / %.3f\n"
                  "  En-word ratio              %12.4f\n"
                  "  En-word ratio (per caption)%12.4f\n"
                  "  Unique tokens              %12llu\n",
                  static_cast<unsigned long long>(count), length_mean, length_std, english_ratio,
                  english_ratio_per_caption, static_cast<unsigned long long>(unique_tokens));
    return buf;
  }
};

// Mergeable single-pass accumulator. Memory is the set of distinct tokens.
class CorpusAccumulator {
 public:
  void add(std::string_view caption) { add_words(split_words(caption)); }

  void add_words(const std::vector<std::string>& words) {
    const CaptionStats s = caption_stats(words);
    ++count_;
    tokens_ += s.tokens;
    tokens_sq_ += static_cast<unsigned __int128>(s.tokens) * s.tokens;
    english_ += s.english;
    if (s.tokens) {
      ratio_sum_ += s.ratio();
      ++nonempty_;
    }
    for (const auto& w : words) unique_.insert(w);
  }

  void merge(const CorpusAccumulator& o) {
    count_ += o.count_;
    tokens_ += o.tokens_;
    tokens_sq_ += o.tokens_sq_;
    english_ += o.english_;
    ratio_sum_ += o.ratio_sum_;
    nonempty_ += o.nonempty_;
    unique_.insert(o.unique_.begin(), o.unique_.end());
  }

  CorpusReport report() const {
    CorpusReport r;
    r.count = count_;
    r.total_tokens = tokens_;
    r.unique_tokens = unique_.size();
    if (count_) {
      const double n = static_cast<double>(count_);
      r.length_mean = static_cast<double>(tokens_) / n;
      // n * sum(x^2) - (sum x)^2 is exact in integers.
      const unsigned __int128 t = tokens_;
      const unsigned __int128 num = static_cast<unsigned __int128>(count_) * tokens_sq_ - t * t;
      r.length_std = std::sqrt(static_cast<double>(num)) / n;
    }
    if (tokens_) r.english_ratio = static_cast<double>(english_) / static_cast<double>(tokens_);
    if (nonempty_) r.english_ratio_per_caption = ratio_sum_ / static_cast<double>(nonempty_);
    return r;
  }

  const std::unordered_set<std::string>& unique() const { return unique_; }

 private:
  std::uint64_t count_ = 0, tokens_ = 0, english_ = 0, nonempty_ = 0;
  unsigned __int128 tokens_sq_ = 0;
  double ratio_sum_ = 0.0;
  std::unordered_set<std::string> unique_;
};

enum class CaptionFormat { Auto, Plain, Manifest };

// Calls `fn` with each caption. Manifest lines contribute their second
// column; Auto treats a line with a TAB as a manifest line. Blank lines are
// not records.
inline void for_each_caption(std::istream& is, CaptionFormat fmt, const std::function<void(const std::string&)>& fn) {
  std::string line;
  std::size_t index = 0;
  while (std::getline(is, line)) {
    ++index;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const bool manifest = fmt == CaptionFormat::Manifest || (fmt == CaptionFormat::Auto && tab != std::string::npos);
    if (manifest) {
      if (tab == std::string::npos) throw IoError("record without a caption column", index);
      const auto end = line.find('\t', tab + 1);
      fn(line.substr(tab + 1, end == std::string::npos ? std::string::npos : end - tab - 1));
    } else {
      fn(line);
    }
  }
  if (is.bad()) throw IoError("read failure after record " + std::to_string(index), index + 1);
}

inline CorpusReport analyze(std::istream& is, CaptionFormat fmt = CaptionFormat::Auto) {
  CorpusAccumulator acc;
  for_each_caption(is, fmt, [&](const std::string& c) { acc.add(c); });
  return acc.report();
}

inline CorpusReport analyze(const std::vector<std::string>& captions) {
  CorpusAccumulator acc;
  for (const auto& c : captions) acc.add(c);
  return acc.report();
}

struct FilterPolicy {
  std::size_t min_length = 0;
  std::size_t max_length = std::numeric_limits<std::size_t>::max();
  double min_english_ratio = 0.0;

  static FilterPolicy permissive() { return {}; }

  void validate() const {
    if (min_length > max_length) throw ConfigError("filter: min_length exceeds max_length");
    if (!(min_english_ratio >= 0.0 && min_english_ratio <= 1.0))
      throw ConfigError("filter: min_english_ratio must be in [0,1]");
  }
};

struct FilterTally {
  std::uint64_t length = 0;  // failed a length bound
  std::uint64_t ratio = 0;   // below the English-word ratio
  std::uint64_t rejected = 0;
  std::uint64_t kept = 0;
};

// Captions failing several rules count once under each.
inline bool accept(const std::vector<std::string>& words, const FilterPolicy& p, FilterTally& tally) {
  const CaptionStats s = caption_stats(words);
  const bool len_ok = s.tokens >= p.min_length && s.tokens <= p.max_length;
  const bool ratio_ok = s.ratio() >= p.min_english_ratio;
  tally.length += !len_ok;
  tally.ratio += !ratio_ok;
  if (len_ok && ratio_ok) {
    ++tally.kept;
    return true;
  }
  ++tally.rejected;
  return false;
}

struct FilterResult {
  std::vector<std::string> kept;
  FilterTally tally;
};

inline FilterResult filter(const std::vector<std::string>& captions, const FilterPolicy& policy) {
  policy.validate();
  FilterResult r;
  for (const auto& c : captions)
    if (accept(split_words(c), policy, r.tally)) r.kept.push_back(c);
  return r;
}

// Streaming form: `keep` receives each accepted caption.
inline FilterTally filter(std::istream& is, const FilterPolicy& policy, CaptionFormat fmt,
                          const std::function<void(const std::string&)>& keep) {
  policy.validate();
  FilterTally tally;
  for_each_caption(is, fmt, [&](const std::string& c) {
    if (accept(split_words(c), policy, tally)) keep(c);
  });
  return tally;
}

}  // namespace clipbench
