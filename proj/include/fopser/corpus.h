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

// Corpus ingestion: CSV manifests, PCM-16 WAV I/O, a deterministic synthetic
// emotional-speech stand-in, and speaker/session aware splits.

#ifndef FOPSER_CORPUS_H_
#define FOPSER_CORPUS_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fopser {

// Fixed class order; indices are used as classifier outputs.
enum class Emotion : uint8_t { kAngry = 0, kHappy = 1, kSad = 2, kNeutral = 3 };
inline constexpr int kNumEmotions = 4;
inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::kAngry, Emotion::kHappy, Emotion::kSad, Emotion::kNeutral};

std::string_view emotion_name(Emotion e);
std::optional<Emotion> parse_emotion(std::string_view name);
inline int emotion_index(Emotion e) { return static_cast<int>(e); }

struct Utterance {
  std::string id;
  std::string audio_path;  // relative to the manifest directory unless absolute
  std::string speaker_id;
  std::string session_id;
  std::optional<Emotion> label;

  bool operator==(const Utterance&) const = default;
};

struct CorpusManifest {
  std::vector<Utterance> utterances;
  std::filesystem::path base_dir;  // directory the audio paths resolve against

  // True iff every utterance carries a label.
  bool labeled() const;
  std::filesystem::path resolve(const Utterance& u) const;
  // Distinct speaker ids in first-appearance order.
  std::vector<std::string> speakers() const;
  std::vector<std::string> sessions() const;

  bool operator==(const CorpusManifest&) const = default;
};

// Parses `id,path,speaker,session,label` CSV (label may be empty). Throws
// std::runtime_error on a missing file, malformed row, duplicate id, unknown
// label, empty speaker/session or an empty corpus.
CorpusManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const CorpusManifest& manifest);

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 0;
};

// RIFF/WAVE, PCM 16-bit mono only. Samples are scaled by 1/32768.
Waveform read_wav(const std::filesystem::path& path);
// Quantizes to PCM-16 (round to nearest, saturating).
void write_wav(const std::filesystem::path& path, const Waveform& wave);

struct SynthSpec {
  int n_speakers = 8;
  int utterances_per_speaker = 20;
  std::vector<Emotion> classes{kAllEmotions.begin(), kAllEmotions.end()};
  double duration_s = 1.0;
  int sample_rate = 16000;
  uint64_t seed = 0;
};

// Per-speaker pitch multiplier in [0.9, 1.1].
double synth_pitch_factor(const SynthSpec& spec, int speaker);

// One synthetic utterance; a pure function of (spec, speaker, index). The
// label is classes[index % classes.size()].
Waveform synth_waveform(const SynthSpec& spec, int speaker, int index);

// Writes spk<s>_utt<u>.wav files plus manifest.csv into `out_dir` and returns
// the manifest. Speakers are grouped two per session.
CorpusManifest synth_corpus(const SynthSpec& spec,
                            const std::filesystem::path& out_dir);

using Split = std::pair<CorpusManifest, CorpusManifest>;  // (train, test)

// Test side holds every utterance of the first `n_test_speakers` distinct
// speakers in manifest order.
Split split_speaker_independent(const CorpusManifest& m, int n_test_speakers);

// Sessions (in first-appearance order) are dealt round-robin onto k folds.
std::vector<Split> kfold_by_session(const CorpusManifest& m, int k);

}  // namespace fopser

#endif  // FOPSER_CORPUS_H_
