#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "clipbench/verify.hpp"
#include "clipbench/zeroshot.hpp"

using namespace clipbench;

TEST(Prompts, RequireExactlyOneSlot) {
  EXPECT_NO_THROW(PromptSet({"a photo of a {label}."}));
  EXPECT_THROW(PromptSet({"a photo."}), ConfigError);
  EXPECT_THROW(PromptSet({"{label} and {label}"}), ConfigError);
  EXPECT_THROW(PromptSet(std::vector<std::string>{}), ConfigError);
  EXPECT_EQ(PromptSet::defaults().fill(0, "red circle"), "a photo of a red circle.");
}

TEST(Prompts, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "clipbench_prompts.txt";
  std::ofstream(path) << "a {label}.\n\nthe {label}.\n";
  EXPECT_EQ(PromptSet::load(path.string()).size(), 2u);
  EXPECT_THROW(PromptSet::load("/nonexistent/prompts.txt"), IoError);
}

TEST(ZeroShot, MeanNormalize) {
  const auto m = mean_normalize({1, 0, 0, 1}, 2, 2);
  EXPECT_NEAR(m[0], std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(m[1], std::sqrt(0.5), 1e-15);
  EXPECT_THROW(mean_normalize({1, 0, -1, 0}, 2, 2), DegenerateInputError);
}

TEST(ZeroShot, ClassifyPicksHighestDotWithLowIndexTies) {
  ClassifierMatrix c{3, 2, {1, 0, 0, 1, 1, 0}};
  const std::vector<double> x{0.9, 0.1, 0.1, 0.9, 1.0, 0.0};
  EXPECT_EQ(classify_embeddings(x, 3, c), (std::vector<std::size_t>{0, 1, 0}));
  EXPECT_THROW(classify_embeddings(x, 2, c), ShapeError);
}

TEST(ZeroShot, AccuracyAndReport) {
  EXPECT_DOUBLE_EQ(top1_accuracy({0, 1, 1, 2}, {0, 1, 2, 2}), 0.75);
  EXPECT_THROW(top1_accuracy({}, {}), ContractError);
  EXPECT_THROW(top1_accuracy({0}, {0, 1}), ContractError);
  const auto r = make_report({"a", "b", "c"}, {0, 1, 1, 2}, {0, 1, 2, 2});
  EXPECT_EQ(r.confusion[2][1], 1u);
  EXPECT_DOUBLE_EQ(r.class_accuracy(2), 0.5);
  EXPECT_NE(r.to_text().find("top1_accuracy=0.750000"), std::string::npos);
}

TEST(ZeroShot, ClassifierRowsAreUnitAndMatchManualEnsemble) {
  ClipModel m(FullStackFixture::tiny_config(), 3);
  const auto ds = generate_synthetic(3, 2, 0);
  Vocab vocab = Vocab::build({split_words("a photo of the red circle green square blue triangle .")}, 16);
  const PromptSet prompts({"a photo of a {label}.", "the {label}."});
  const auto c = build_classifier(ds.class_names, prompts, m, vocab);
  ASSERT_EQ(c.classes, 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    double ss = 0;
    for (double v : c.row(k)) ss += v * v;
    EXPECT_NEAR(ss, 1.0, 1e-12);
    std::vector<double> sum(c.dim, 0.0);
    for (std::size_t t = 0; t < 2; ++t) {
      const auto tok = tokenize(prompts.fill(t, ds.class_names[k]), vocab, 6);
      const auto e = m.encode_text(make_token_batch({tok}));
      for (std::size_t d = 0; d < c.dim; ++d) sum[d] += e.pooled[d];
    }
    double n = 0;
    for (double v : sum) n += v * v;
    for (std::size_t d = 0; d < c.dim; ++d) EXPECT_NEAR(c.row(k)[d], sum[d] / std::sqrt(n), 1e-12);
  }
  EXPECT_THROW(build_classifier({"   "}, prompts, m, vocab), ContractError);
}

TEST(ZeroShot, ClassifyIndependentOfChunking) {
  ClipModel m(FullStackFixture::tiny_config(), 4);
  const auto ds = generate_synthetic(3, 4, 1, 8);
  std::vector<Image> images;
  for (const auto& r : ds.records) images.push_back(load_image(r, 8));
  Vocab vocab = Vocab::build({split_words("a photo of red circle green square blue triangle")}, 16);
  const auto c = build_classifier(ds.class_names, PromptSet::defaults(), m, vocab);
  EXPECT_EQ(classify(images, c, m, 5), classify(images, c, m, 64));
}
