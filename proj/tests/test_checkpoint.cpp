#include <gtest/gtest.h>

#include "trainer_fixture.hpp"

using namespace clipbench;
using namespace clipbench::testing;

namespace {

Checkpoint random_checkpoint(Rng& rng) {
  Checkpoint ck;
  const std::size_t nkv = rng.index(5);
  for (std::size_t i = 0; i < nkv; ++i) ck.config.emplace_back("key" + std::to_string(i), "v=" + std::to_string(rng.index(100)));
  const std::size_t np = rng.index(4);
  for (std::size_t i = 0; i < np; ++i) {
    NamedArray a;
    a.name = "p" + std::to_string(i);
    const std::size_t rank = rng.index(4);
    for (std::size_t k = 0; k < rank; ++k) a.shape.push_back(1 + rng.index(3));
    a.data.resize(shape_numel(a.shape));
    for (auto& v : a.data) v = rng.normal() * 1e3;
    ck.params.push_back(std::move(a));
  }
  const std::size_t nb = rng.index(3);
  for (std::size_t i = 0; i < nb; ++i) {
    ExtensionBlock b{"BLK" + std::to_string(i), {}};
    b.bytes.resize(rng.index(20));
    for (auto& x : b.bytes) x = static_cast<std::uint8_t>(rng.index(256));
    ck.blocks.push_back(std::move(b));
  }
  return ck;
}

}  // namespace

TEST(Checkpoint, EncodeDecodeRoundTripProperty) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const Checkpoint ck = random_checkpoint(rng);
    const auto bytes = encode_checkpoint(ck);
    EXPECT_EQ(decode_checkpoint(bytes), ck);
    EXPECT_EQ(encode_checkpoint(decode_checkpoint(bytes)), bytes);
  }
}

TEST(Checkpoint, EveryTruncationIsRejected) {
  Rng rng(32);
  Checkpoint ck = random_checkpoint(rng);
  ck.params.push_back({"w", {2, 2}, {1, 2, 3, 4}});
  ck.blocks.push_back({"TAIL", {1, 2, 3}});
  const auto bytes = encode_checkpoint(ck);
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_THROW(decode_checkpoint(cut), ArtifactMismatchError) << "prefix " << n;
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), ArtifactMismatchError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), ArtifactMismatchError);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), ArtifactMismatchError);
}

TEST(Checkpoint, LittleEndianLayout) {
  Checkpoint ck;
  ck.params.push_back({"a", {1}, {1.0}});
  const auto b = encode_checkpoint(ck);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 8), "CLIPBNCH");
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[9], 0);
  // 1.0 = 0x3FF0000000000000, little-endian; it sits right before the block count.
  const std::size_t off = b.size() - 4 - 8;
  EXPECT_EQ(b[off + 7], 0x3F);
  EXPECT_EQ(b[off + 6], 0xF0);
}

TEST(Checkpoint, SaveLoadFile) {
  const auto dir = fresh_dir("ckpt_file");
  Rng rng(33);
  const Checkpoint ck = random_checkpoint(rng);
  save_checkpoint(dir + "/a.ckpt", ck);
  EXPECT_EQ(load_checkpoint(dir + "/a.ckpt"), ck);
  EXPECT_FALSE(std::filesystem::exists(dir + "/a.ckpt.tmp"));
  EXPECT_THROW(load_checkpoint(dir + "/missing.ckpt"), IoError);
}

TEST(Checkpoint, RestoreParamsChecksNamesAndShapes) {
  ClipModel a(FullStackFixture::tiny_config(), 1), b(FullStackFixture::tiny_config(), 2);
  auto snap = snapshot_params(a.params());
  restore_params(b.params(), snap);
  EXPECT_EQ(snapshot_params(b.params()), snap);

  auto renamed = snap;
  renamed[0].name = "nope";
  EXPECT_THROW(restore_params(b.params(), renamed), ArtifactMismatchError);
  auto reshaped = snap;
  reshaped[1].shape.push_back(1);
  EXPECT_THROW(restore_params(b.params(), reshaped), ArtifactMismatchError);
  auto fewer = snap;
  fewer.pop_back();
  EXPECT_THROW(restore_params(b.params(), fewer), ArtifactMismatchError);
}

TEST(Checkpoint, ModelConfigFromKeyValues) {
  ModelConfig cfg = FullStackFixture::tiny_config();
  cfg.text.depth = 2;
  KeyValues kvs = cfg.to_kv();
  kvs.emplace_back("train.variant", "clip");
  EXPECT_EQ(model_config_from(kvs), cfg);
  kvs.emplace_back("vit.patch_size", "3");
  EXPECT_THROW(model_config_from(kvs), ArtifactMismatchError);
}

TEST(Checkpoint, TrainStateBlocksRoundTrip) {
  TrainState s;
  s.step = 17;
  s.best_accuracy = 0.625;
  s.adam.t = 17;
  s.adam.m = {{1, 2}, {3}};
  s.adam.v = {{4, 5}, {6}};
  NNQueue q(3, 2);
  q.push(std::vector<double>{1, 0, 0, 1}, 4);
  TrainState back;
  decode_progress(encode_progress(s), back);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(back.best_accuracy, 0.625);
  EXPECT_EQ(decode_adam(encode_adam(s.adam)), s.adam);
  const NNQueue q2 = decode_queue(encode_queue(q));
  EXPECT_EQ(q2.capacity(), 3u);
  ASSERT_EQ(q2.size(), 2u);
  EXPECT_EQ(q2.entries()[1].vector, (std::vector<double>{0, 1}));
  EXPECT_EQ(q2.entries()[1].step, 4u);
}

TEST(Checkpoint, LoadModelReproducesEmbeddings) {
  const auto dir = fresh_dir("ckpt_model");
  const TrainingData data = tiny_data();
  const auto res = train(tiny_setup(Variant::Clip, dir, 1), data);
  EXPECT_EQ(res.steps, 6u);
  LoadedModel m = load_model(dir + "/final.ckpt");
  EXPECT_EQ(m.class_names, data.class_names);
  Trainer t(tiny_setup(Variant::Clip, dir + "/again", 1), data);
  t.run();
  const Image im = load_image(data.val[0], 8);
  const auto a = m.model->encode_image(stack_images({&im})).pooled.values();
  const auto b = t.model().encode_image(stack_images({&im})).pooled.values();
  EXPECT_EQ(a, b);
  EXPECT_EQ(m.vocab.words_line(), t.vocab().words_line());
}
