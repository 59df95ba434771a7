#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "clipbench/corpus_stats.hpp"
#include "clipbench/data.hpp"
#include "clipbench/rng.hpp"

using namespace clipbench;

namespace {

// Two-pass reference over whitespace/punctuation tokens.
struct Reference {
  double mean = 0, std = 0, ratio = 0, per_caption = 0;
  std::size_t unique = 0, total = 0;
};

Reference reference(const std::vector<std::string>& captions) {
  Reference r;
  std::vector<double> lens;
  std::set<std::string> uniq;
  std::size_t en = 0, total = 0, nonempty = 0;
  double per = 0;
  for (const auto& c : captions) {
    const auto w = split_words(c);
    lens.push_back(static_cast<double>(w.size()));
    std::size_t e = 0;
    for (const auto& t : w) {
      uniq.insert(t);
      bool letters = !t.empty();
      for (char ch : t) letters = letters && std::isalpha(static_cast<unsigned char>(ch));
      e += letters;
    }
    en += e;
    total += w.size();
    if (!w.empty()) {
      per += static_cast<double>(e) / static_cast<double>(w.size());
      ++nonempty;
    }
  }
  for (double l : lens) r.mean += l;
  r.mean /= static_cast<double>(lens.size());
  for (double l : lens) r.std += (l - r.mean) * (l - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(lens.size()));
  r.ratio = total ? static_cast<double>(en) / static_cast<double>(total) : 0;
  r.per_caption = nonempty ? per / static_cast<double>(nonempty) : 0;
  r.unique = uniq.size();
  r.total = total;
  return r;
}

std::vector<std::string> random_captions(Rng& rng, std::size_t n) {
  const std::vector<std::string> words{"a", "red", "circle", "on", "the", "table", "foto", "42", "ünï", ".", ",",
                                       "blue", "x9", "photo", "of", "dog"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string c;
    const std::size_t len = 1 + rng.index(20);
    for (std::size_t k = 0; k < len; ++k) c += (k ? " " : "") + words[rng.index(words.size())];
    out.push_back(c);
  }
  return out;
}

void expect_matches(const CorpusReport& got, const Reference& want) {
  EXPECT_NEAR(got.length_mean, want.mean, 1e-9);
  EXPECT_NEAR(got.length_std, want.std, 1e-9);
  EXPECT_NEAR(got.english_ratio, want.ratio, 1e-12);
  EXPECT_NEAR(got.english_ratio_per_caption, want.per_caption, 1e-9);
  EXPECT_EQ(got.unique_tokens, want.unique);
  EXPECT_EQ(got.total_tokens, want.total);
}

}  // namespace

TEST(CorpusStats, HandComputedFixture) {
  const auto r = analyze(std::vector<std::string>{"a red circle", "foto 42", "the dog ."});
  EXPECT_EQ(r.count, 3u);
  EXPECT_DOUBLE_EQ(r.length_mean, 8.0 / 3.0);
  EXPECT_NEAR(r.length_std, std::sqrt(2.0 / 9.0), 1e-15);
  EXPECT_DOUBLE_EQ(r.english_ratio, 6.0 / 8.0);
  EXPECT_NEAR(r.english_ratio_per_caption, (1.0 + 0.5 + 2.0 / 3.0) / 3.0, 1e-15);
  EXPECT_EQ(r.unique_tokens, 8u);
}

TEST(CorpusStats, EnglishWordRule) {
  EXPECT_TRUE(is_english_word("Photo"));
  EXPECT_FALSE(is_english_word("x9"));
  EXPECT_FALSE(is_english_word("."));
  EXPECT_FALSE(is_english_word("ünï"));
  EXPECT_FALSE(is_english_word(""));
}

TEST(CorpusStats, MatchesReferenceProperty) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto caps = random_captions(rng, 1 + rng.index(200));
    expect_matches(analyze(caps), reference(caps));
  }
}

TEST(CorpusStats, ShardMergeEqualsSinglePass) {
  Rng rng(22);
  const auto caps = random_captions(rng, 10000);
  CorpusAccumulator whole;
  for (const auto& c : caps) whole.add(c);
  std::vector<CorpusAccumulator> shards(7);
  for (std::size_t i = 0; i < caps.size(); ++i) shards[(i * 31) % 7].add(caps[i]);
  CorpusAccumulator merged;
  for (const auto& s : shards) merged.merge(s);
  const auto a = whole.report(), b = merged.report();
  EXPECT_EQ(a.count, b.count);
  EXPECT_EQ(a.length_mean, b.length_mean);
  EXPECT_EQ(a.length_std, b.length_std);
  EXPECT_EQ(a.english_ratio, b.english_ratio);
  EXPECT_NEAR(a.english_ratio_per_caption, b.english_ratio_per_caption, 1e-12);
  EXPECT_EQ(a.unique_tokens, b.unique_tokens);
  expect_matches(a, reference(caps));
}

TEST(CorpusStats, StreamFormats) {
  std::istringstream plain("a red circle\n\nfoto 42\n");
  EXPECT_EQ(analyze(plain, CaptionFormat::Plain).count, 2u);
  std::istringstream manifest("img1\ta red circle\t0\nimg2\tfoto\n");
  const auto r = analyze(manifest, CaptionFormat::Auto);
  EXPECT_EQ(r.count, 2u);
  EXPECT_EQ(r.total_tokens, 4u);
  std::istringstream bad("img1\ta caption\nno caption column\n");
  EXPECT_THROW(analyze(bad, CaptionFormat::Manifest), IoError);
}

TEST(CorpusStats, EmptyCorpus) {
  const auto r = analyze(std::vector<std::string>{});
  EXPECT_EQ(r.count, 0u);
  EXPECT_EQ(r.length_mean, 0.0);
}

TEST(Filter, RulesAndTally) {
  FilterPolicy p;
  p.min_length = 2;
  p.max_length = 4;
  p.min_english_ratio = 0.6;
  const auto r = filter({"a red circle", "dog", "foto 42 x9", "one two three four five", "42"}, p);
  EXPECT_EQ(r.kept, (std::vector<std::string>{"a red circle"}));
  EXPECT_EQ(r.tally.kept, 1u);
  EXPECT_EQ(r.tally.rejected, 4u);
  EXPECT_EQ(r.tally.length, 3u);
  EXPECT_EQ(r.tally.ratio, 2u);
  p.min_length = 5;
  EXPECT_THROW(filter({"x"}, p), ConfigError);
}

TEST(Filter, KeptCaptionsSatisfyPolicyProperty) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const auto caps = random_captions(rng, 100);
    FilterPolicy p;
    p.min_length = rng.index(5);
    p.max_length = p.min_length + rng.index(15);
    p.min_english_ratio = rng.uniform();
    const auto r = filter(caps, p);
    EXPECT_EQ(r.tally.kept + r.tally.rejected, caps.size());
    for (const auto& c : r.kept) {
      const auto s = caption_stats(split_words(c));
      EXPECT_GE(s.tokens, p.min_length);
      EXPECT_LE(s.tokens, p.max_length);
      EXPECT_GE(s.ratio(), p.min_english_ratio);
    }
    std::istringstream is([&] {
      std::string s;
      for (const auto& c : caps) s += c + "\n";
      return s;
    }());
    std::vector<std::string> streamed;
    filter(is, p, CaptionFormat::Plain, [&](const std::string& c) { streamed.push_back(c); });
    EXPECT_EQ(streamed, r.kept);
  }
}
