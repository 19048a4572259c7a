// Copyright 2026 The fopser Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fopser/checkpoint.h"

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "fopser/errors.h"
#include "oracles.h"

namespace fopser {
namespace {

namespace fs = std::filesystem;

Checkpoint make_checkpoint(bool with_head, uint64_t seed = 1) {
  FopConfig c;
  c.d_feat = 6;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 11;
  Checkpoint ck;
  ck.config = c;
  ck.frames.n_mels = 6;
  Rng rng(seed);
  ck.params = init_params<float>(c, rng);
  if (with_head) ck.head = init_head<float>(8, rng);
  ck.norm.mean = RowVector<float>::LinSpaced(6, -1, 1);
  ck.norm.std = RowVector<float>::Constant(6, 0.5f);
  ck.provenance = {"pretrain", seed, 12, 1.25, 0.1 / 3.0, 0.2, 0.3};
  return ck;
}

FormatErrorCode decode_error(const std::vector<uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decoded without error";
  return FormatErrorCode::kIo;
}

void reseal(std::vector<uint8_t>& bytes) {
  const uint32_t crc = crc32_of(std::span<const uint8_t>(bytes).subspan(4, bytes.size() - 8));
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
}

TEST(Crc32Test, KnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of({reinterpret_cast<const uint8_t*>(s.data()), s.size()}), 0xCBF43926u);
}

TEST(ContainerTest, RoundTrip) {
  Container c;
  c.config = {{"a", "1"}, {"b", "x y"}};
  c.tensors.push_back({"t", {2, 3}, {1, 2, 3, 4, 5, 6}});
  c.tensors.push_back({"s", {}, {7}});
  const std::vector<uint8_t> bytes = encode_container(c);
  EXPECT_EQ(std::memcmp(bytes.data(), "FOPC", 4), 0);
  const Container back = decode_container(bytes);
  EXPECT_EQ(back.config, c.config);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors[0].dims, (std::vector<uint32_t>{2, 3}));
  EXPECT_EQ(back.tensors[1].data, std::vector<float>{7});
  EXPECT_EQ(*back.find("b"), "x y");
  EXPECT_EQ(back.find("zz"), nullptr);
}

TEST(CheckpointTest, RoundTripBitwise) {
  for (bool head : {false, true}) {
    const Checkpoint ck = make_checkpoint(head);
    const std::vector<uint8_t> a = encode_checkpoint(ck);
    const Checkpoint back = decode_checkpoint(a);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(back.frames.n_mels, 6);
    EXPECT_EQ(back.params.layers[1].w_value, ck.params.layers[1].w_value);
    EXPECT_EQ(back.head.has_value(), head);
    EXPECT_EQ(back.provenance, ck.provenance);
    EXPECT_EQ(back.norm.mean, ck.norm.mean);
    EXPECT_EQ(encode_checkpoint(back), a);
  }
}

TEST(CheckpointTest, SaveLoadSaveIdenticalFiles) {
  const fs::path dir = oracle::temp_dir("ckpt_files");
  save_checkpoint(make_checkpoint(true), dir / "a.fopc");
  save_checkpoint(load_checkpoint(dir / "a.fopc"), dir / "b.fopc");
  std::ifstream x(dir / "a.fopc", std::ios::binary), y(dir / "b.fopc", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(x), {}),
            std::string(std::istreambuf_iterator<char>(y), {}));
  EXPECT_THROW(load_checkpoint(dir / "missing.fopc"), FormatError);
}

TEST(CheckpointTest, CorruptionErrorsAreDistinct) {
  const std::vector<uint8_t> good = encode_checkpoint(make_checkpoint(false));
  std::vector<uint8_t> b = good;
  b[1] = 'X';
  EXPECT_EQ(decode_error(b), FormatErrorCode::kBadMagic);
  b = good;
  b[4] = 7;
  EXPECT_EQ(decode_error(b), FormatErrorCode::kVersionMismatch);
  b = good;
  b[good.size() / 2] ^= 0x10;
  EXPECT_EQ(decode_error(b), FormatErrorCode::kCrcMismatch);
  b.assign(good.begin(), good.begin() + 10);
  EXPECT_EQ(decode_error(b), FormatErrorCode::kTruncated);
}

TEST(CheckpointTest, ShapeMismatchWithValidCrc) {
  Container c = decode_container(encode_checkpoint(make_checkpoint(false)));
  for (TensorRecord& t : c.tensors) {
    if (t.name == "layer1.ff.W1") {
      t.dims = {8, 10};
      t.data.resize(80);
    }
  }
  EXPECT_EQ(decode_error(encode_container(c)), FormatErrorCode::kShapeMismatch);

  Container missing = decode_container(encode_checkpoint(make_checkpoint(false)));
  missing.tensors.pop_back();
  EXPECT_EQ(decode_error(encode_container(missing)), FormatErrorCode::kShapeMismatch);

  Container cfg = decode_container(encode_checkpoint(make_checkpoint(false)));
  for (auto& [k, v] : cfg.config)
    if (k == "model.d_model") v = "16";
  EXPECT_EQ(decode_error(encode_container(cfg)), FormatErrorCode::kShapeMismatch);
}

TEST(CheckpointTest, TensorCountDisagreesWithPayload) {
  std::vector<uint8_t> b = encode_checkpoint(make_checkpoint(false));
  uint32_t cfg_len = 0;
  std::memcpy(&cfg_len, b.data() + 8, 4);
  const size_t count_at = 12 + cfg_len;
  uint32_t count = 0;
  std::memcpy(&count, b.data() + count_at, 4);
  --count;
  std::memcpy(b.data() + count_at, &count, 4);
  reseal(b);
  EXPECT_EQ(decode_error(b), FormatErrorCode::kTrailingData);
  count += 2;
  std::memcpy(b.data() + count_at, &count, 4);
  reseal(b);
  EXPECT_EQ(decode_error(b), FormatErrorCode::kTruncated);
}

TEST(CheckpointTest, BadConfigValue) {
  Container c = decode_container(encode_checkpoint(make_checkpoint(false)));
  for (auto& [k, v] : c.config)
    if (k == "model.n_layers") v = "two";
  EXPECT_EQ(decode_error(encode_container(c)), FormatErrorCode::kBadConfig);
}

TEST(CheckpointTest, CompatPresetSupportsAdd) {
  Checkpoint ck;
  ck.config = FopConfig::hypercolumn_add_compat();
  Rng rng(0);
  ck.params = init_params<float>(ck.config, rng);
  ck.norm.mean = RowVector<float>::Zero(80);
  ck.norm.std = RowVector<float>::Ones(80);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.config.d_model, 80);
  Matrix<float> f = Matrix<float>::Random(10, 80);
  EXPECT_NO_THROW(extract_feature(f, back.params, back.config, FeatureKind::parse("add")));
}

TEST(ClassifierFileTest, RoundTrip) {
  const fs::path dir = oracle::temp_dir("clf_file");
  LinearClassifier clf;
  clf.kind = ClassifierKind::kLinearSvm;
  clf.weights = Matrix<double>::Constant(3, 4, 0.25);
  clf.bias = RowVector<double>::Constant(4, -0.5);
  clf.input_mean = RowVector<double>::Constant(3, 1.0);
  clf.input_std = RowVector<double>::Constant(3, 2.0);
  save_classifier(clf, FeatureKind::parse("concat"), dir / "c.fopc");
  const auto [back, kind] = load_classifier(dir / "c.fopc");
  EXPECT_EQ(back.kind, ClassifierKind::kLinearSvm);
  EXPECT_EQ(back.weights, clf.weights);
  EXPECT_EQ(back.bias, clf.bias);
  EXPECT_EQ(kind, FeatureKind::parse("concat"));
  EXPECT_THROW(load_checkpoint(dir / "c.fopc"), FormatError);
}

}  // namespace
}  // namespace fopser
