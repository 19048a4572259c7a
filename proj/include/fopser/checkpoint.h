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

// "FOPC" v1 container:
//
//   "FOPC" | u32 version | u32 config_len | config_len bytes of UTF-8
//   "key=value\n" lines | u32 tensor_count | tensors... | u32 crc32
//
// where each tensor is u16 name_len | name | u8 rank | u32 dims[rank] |
// float32 payload (row-major). All integers are little-endian and the CRC32
// covers every byte after the magic and before the CRC itself.

#ifndef FOPSER_CHECKPOINT_H_
#define FOPSER_CHECKPOINT_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fopser/features.h"
#include "fopser/fop_model.h"
#include "fopser/transfer.h"

namespace fopser {

inline constexpr uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<uint32_t> dims;
  std::vector<float> data;
};

struct Container {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<TensorRecord> tensors;

  const std::string* find(const std::string& key) const;
};

uint32_t crc32_of(std::span<const uint8_t> bytes);

std::vector<uint8_t> encode_container(const Container& c);
// Throws FormatError: kBadMagic, kVersionMismatch, kCrcMismatch, kTruncated,
// kTrailingData (tensor count disagrees with the payload) or kBadConfig.
Container decode_container(std::span<const uint8_t> bytes);

struct Provenance {
  std::string stage = "init";  // init | pretrain | finetune
  uint64_t seed = 0;
  int epochs_run = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double best_val_score = 0.0;
  double final_val_score = 0.0;

  bool operator==(const Provenance&) const = default;
};

struct Checkpoint {
  FopConfig config;
  FrameConfig frames;
  FopParams<float> params;
  std::optional<FinetuneHead<float>> head;
  NormStats norm;
  Provenance provenance;
};

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Additionally throws kShapeMismatch when a tensor disagrees with the config.
Checkpoint decode_checkpoint(std::span<const uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Classifiers use the same container, tagged artifact=classifier.
void save_classifier(const LinearClassifier& clf, const FeatureKind& kind,
                     const std::filesystem::path& path);
std::pair<LinearClassifier, FeatureKind> load_classifier(
    const std::filesystem::path& path);

}  // namespace fopser

#endif  // FOPSER_CHECKPOINT_H_
