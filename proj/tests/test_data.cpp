#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "clipbench/data.hpp"

using namespace clipbench;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("clipbench_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Tokenizer, SplitsLowercasesAndSeparatesPunctuation) {
  EXPECT_EQ(split_words("A Red, circle.\tOK"),
            (std::vector<std::string>{"a", "red", ",", "circle", ".", "ok"}));
  EXPECT_TRUE(split_words("   \n").empty());
  EXPECT_EQ(split_words("close-up"), (std::vector<std::string>{"close", "-", "up"}));
}

TEST(Vocab, FrequencyOrderWithAlphabeticalTies) {
  const auto v = Vocab::build({{"b", "a", "c", "b"}, {"a", "b", "d"}}, 8);
  EXPECT_EQ(v.words_line(), "b a c");
  EXPECT_EQ(v.size(), 8u);
  EXPECT_EQ(v.id("b"), special::kCount);
  EXPECT_EQ(v.id("zzz"), special::kUnk);
}

TEST(Vocab, WordsLineRoundTrip) {
  const auto v = Vocab::build({split_words("the quick brown fox jumps over the lazy dog .")}, 100);
  const auto back = Vocab::from_words(v.words_line());
  ASSERT_EQ(back.size(), v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) EXPECT_EQ(back.word(i), v.word(i));
  EXPECT_THROW(Vocab::from_words("a b a"), ArtifactMismatchError);
}

TEST(Tokenizer, WrapsTruncatesAndPads) {
  const auto v = Vocab::build({{"red", "circle"}}, 20);
  const auto t = tokenize("red circle", v, 6);
  EXPECT_EQ(t.ids, (std::vector<int>{special::kStart, v.id("red"), v.id("circle"), special::kEnd, special::kPad,
                                     special::kPad}));
  EXPECT_EQ(t.valid, (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0}));
  const auto cut = tokenize("red red red red red", v, 4);
  EXPECT_EQ(cut.ids, (std::vector<int>{special::kStart, v.id("red"), v.id("red"), special::kEnd}));
  EXPECT_EQ(detokenize(t.ids, v), (std::vector<std::string>{"red", "circle"}));
  EXPECT_THROW(tokenize("x", v, 1), ContractError);
}

TEST(Tokenizer, BatchTrimsToLongest) {
  const auto v = Vocab::build({{"a", "b", "c"}}, 20);
  const auto b = make_token_batch({tokenize("a b c", v, 10), tokenize("a", v, 10)});
  EXPECT_EQ(b.length, 5u);
  EXPECT_EQ(b.batch, 2u);
  EXPECT_EQ(b.eot_position(0), 4u);
  EXPECT_EQ(b.eot_position(1), 2u);
}

TEST(Synthetic, ClassSchemeIsInjective) {
  std::set<std::string> names;
  for (std::size_t k = 0; k < kMaxSyntheticClasses; ++k) names.insert(synthetic_class_name(k));
  EXPECT_EQ(names.size(), kMaxSyntheticClasses);
  EXPECT_EQ(synthetic_class_name(0), "red circle");
}

TEST(Synthetic, DeterministicAndLabelled) {
  const auto a = generate_synthetic(8, 10, 3), b = generate_synthetic(8, 10, 3), c = generate_synthetic(8, 10, 4);
  ASSERT_EQ(a.records.size(), 80u);
  EXPECT_EQ(a.class_names.size(), 8u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].image_ref, b.records[i].image_ref);
    EXPECT_EQ(*a.records[i].label, i / 10);
    EXPECT_NE(a.records[i].caption.find(a.class_names[i / 10]), std::string::npos);
  }
  EXPECT_NE(a.records[0].image_ref, c.records[0].image_ref);
  EXPECT_THROW(generate_synthetic(1, 10, 0), ContractError);
  EXPECT_THROW(generate_synthetic(kMaxSyntheticClasses + 1, 1, 0), ContractError);
}

TEST(Synthetic, SpecRoundTripAndRender) {
  const auto ds = generate_synthetic(4, 5, 1);
  for (const auto& r : ds.records) {
    const auto s = SyntheticSpec::parse(r.image_ref);
    EXPECT_EQ(s.to_string(), r.image_ref);
    EXPECT_EQ(s.caption(), r.caption);
    const Image im = render_synthetic(s, 32);
    EXPECT_EQ(im.pixels.size(), 3u * 32 * 32);
    for (double p : im.pixels) {
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
    }
  }
  EXPECT_THROW(SyntheticSpec::parse("synthetic:class=0"), IoError);
}

TEST(Farbfeld, RoundTripWithin16BitQuantization) {
  const auto dir = temp_dir("farbfeld");
  const Image im = render_synthetic(SyntheticSpec::parse(generate_synthetic(2, 1, 5).records[0].image_ref), 16);
  farbfeld::write((dir / "x.ff").string(), im);
  const Image back = farbfeld::read((dir / "x.ff").string());
  ASSERT_EQ(back.height, 16u);
  ASSERT_EQ(back.width, 16u);
  for (std::size_t i = 0; i < im.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], im.pixels[i], 0.5 / 65535.0 + 1e-12);
  EXPECT_EQ(fs::file_size(dir / "x.ff"), 16u + 16 * 16 * 8);
  EXPECT_THROW(farbfeld::read((dir / "missing.ff").string()), IoError);
}

TEST(Manifest, ParsesLabelsAndReportsLines) {
  std::istringstream ok("a.ff\ta red circle.\t0\nb.ff\tno label here\n\n");
  const auto r = read_manifest(ok);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].label, std::optional<std::size_t>(0));
  EXPECT_FALSE(r[1].label.has_value());
  std::istringstream bad("a.ff\tfine\nno tab on this line\n");
  try {
    read_manifest(bad, "m.tsv");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Manifest, WriteReadRoundTrip) {
  const auto dir = temp_dir("manifest");
  const auto ds = generate_synthetic(3, 4, 2);
  write_manifest((dir / "m.tsv").string(), ds.records);
  const auto back = read_manifest((dir / "m.tsv").string());
  ASSERT_EQ(back.size(), ds.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].image_ref, ds.records[i].image_ref);
    EXPECT_EQ(back[i].caption, ds.records[i].caption);
    EXPECT_EQ(back[i].label, ds.records[i].label);
  }
}

TEST(Loader, EpochsArePermutationsDroppingTheTail) {
  const auto ds = generate_synthetic(2, 11, 0);
  PairLoader loader(ds.records, 4, 7);
  EXPECT_EQ(loader.batches_per_epoch(), 5u);
  for (std::uint64_t e = 0; e < 5; ++e) {
    const auto idx = loader.epoch_indices(e);
    ASSERT_EQ(idx.size(), 5u);
    std::set<std::size_t> seen;
    for (const auto& b : idx) {
      EXPECT_EQ(b.size(), 4u);
      seen.insert(b.begin(), b.end());
    }
    EXPECT_EQ(seen.size(), 20u);
    EXPECT_EQ(idx, PairLoader(ds.records, 4, 7).epoch_indices(e));
  }
  EXPECT_NE(loader.epoch_indices(0), loader.epoch_indices(1));
}

TEST(Images, StackProducesNchw) {
  const auto ds = generate_synthetic(2, 1, 0);
  const Image a = load_image(ds.records[0], 16), b = load_image(ds.records[1], 16);
  const Tensor t = stack_images({&a, &b});
  EXPECT_EQ(t.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(t[3 * 16 * 16 + 5], b.pixels[5]);
}
