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

#include "fopser/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "binary_io.h"
#include "fopser/errors.h"
#include "fopser/numerics.h"

namespace fopser {

namespace {

constexpr std::string_view kManifestHeader = "id,path,speaker,session,label";

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::vector<std::string> distinct_in_order(
    const std::vector<Utterance>& utts, std::string Utterance::*field) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const Utterance& u : utts) {
    if (seen.insert(u.*field).second) out.push_back(u.*field);
  }
  return out;
}

CorpusManifest with_utterances(const CorpusManifest& like,
                               std::vector<Utterance> utts) {
  CorpusManifest m;
  m.base_dir = like.base_dir;
  m.utterances = std::move(utts);
  return m;
}

}  // namespace

std::string_view format_error_name(FormatErrorCode code) {
  switch (code) {
    case FormatErrorCode::kIo: return "io";
    case FormatErrorCode::kBadMagic: return "bad-magic";
    case FormatErrorCode::kVersionMismatch: return "version-mismatch";
    case FormatErrorCode::kUnsupported: return "unsupported";
    case FormatErrorCode::kTruncated: return "truncated";
    case FormatErrorCode::kCrcMismatch: return "crc-mismatch";
    case FormatErrorCode::kShapeMismatch: return "shape-mismatch";
    case FormatErrorCode::kTrailingData: return "trailing-data";
    case FormatErrorCode::kBadConfig: return "bad-config";
  }
  return "unknown";
}

std::string_view emotion_name(Emotion e) {
  switch (e) {
    case Emotion::kAngry: return "angry";
    case Emotion::kHappy: return "happy";
    case Emotion::kSad: return "sad";
    case Emotion::kNeutral: return "neutral";
  }
  return "unknown";
}

std::optional<Emotion> parse_emotion(std::string_view name) {
  for (Emotion e : kAllEmotions) {
    if (emotion_name(e) == name) return e;
  }
  return std::nullopt;
}

bool CorpusManifest::labeled() const {
  return !utterances.empty() &&
         std::all_of(utterances.begin(), utterances.end(),
                     [](const Utterance& u) { return u.label.has_value(); });
}

std::filesystem::path CorpusManifest::resolve(const Utterance& u) const {
  std::filesystem::path p(u.audio_path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::string> CorpusManifest::speakers() const {
  return distinct_in_order(utterances, &Utterance::speaker_id);
}

std::vector<std::string> CorpusManifest::sessions() const {
  return distinct_in_order(utterances, &Utterance::session_id);
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest not found: " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("manifest is empty: " + path.string());
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw std::runtime_error("manifest header must be '" +
                             std::string(kManifestHeader) + "'");
  }
  CorpusManifest m;
  m.base_dir = path.parent_path();
  std::unordered_set<std::string> ids;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_row(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 5) {
      throw std::runtime_error(where + ": expected 5 columns, got " +
                               std::to_string(f.size()));
    }
    Utterance u{f[0], f[1], f[2], f[3], std::nullopt};
    if (u.id.empty() || u.audio_path.empty() || u.speaker_id.empty() ||
        u.session_id.empty()) {
      throw std::runtime_error(where + ": id, path, speaker and session are required");
    }
    if (!f[4].empty()) {
      u.label = parse_emotion(f[4]);
      if (!u.label) throw std::runtime_error(where + ": unknown label '" + f[4] + "'");
    }
    if (!ids.insert(u.id).second) {
      throw std::runtime_error(where + ": duplicate id '" + u.id + "'");
    }
    m.utterances.push_back(std::move(u));
  }
  if (m.utterances.empty()) {
    throw std::runtime_error("empty corpus: " + path.string());
  }
  return m;
}

void write_manifest(const std::filesystem::path& path,
                    const CorpusManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  out << kManifestHeader << '\n';
  for (const Utterance& u : manifest.utterances) {
    out << u.id << ',' << u.audio_path << ',' << u.speaker_id << ','
        << u.session_id << ',';
    if (u.label) out << emotion_name(*u.label);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Waveform read_wav(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = internal::read_file(path);
  internal::ByteReader r(bytes.data(), bytes.size());
  const std::string name = path.string();
  if (bytes.size() < 12 || r.str(4) != "RIFF") {
    throw FormatError(FormatErrorCode::kBadMagic, name + ": not a RIFF file");
  }
  r.u32();
  if (r.str(4) != "WAVE") {
    throw FormatError(FormatErrorCode::kBadMagic, name + ": not a WAVE file");
  }
  bool have_fmt = false;
  Waveform wave;
  while (true) {
    if (r.remaining() < 8) {
      throw FormatError(FormatErrorCode::kTruncated, name + ": no data chunk");
    }
    const std::string id = r.str(4);
    const uint32_t size = r.u32();
    if (id == "fmt ") {
      if (size < 16 || size > r.remaining()) {
        throw FormatError(FormatErrorCode::kTruncated, name + ": short fmt chunk");
      }
      const uint16_t format = r.u16();
      const uint16_t channels = r.u16();
      const uint32_t rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      const uint16_t bits = r.u16();
      r.skip(size - 16 + (size & 1));
      if (format != 1) {
        throw FormatError(FormatErrorCode::kUnsupported,
                          name + ": only PCM encoding is supported");
      }
      if (channels != 1) {
        throw FormatError(FormatErrorCode::kUnsupported,
                          name + ": only mono audio is supported");
      }
      if (bits != 16) {
        throw FormatError(FormatErrorCode::kUnsupported,
                          name + ": only 16-bit samples are supported");
      }
      if (rate == 0) {
        throw FormatError(FormatErrorCode::kUnsupported, name + ": zero sample rate");
      }
      wave.sample_rate = static_cast<int>(rate);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) {
        throw FormatError(FormatErrorCode::kUnsupported,
                          name + ": data chunk before fmt chunk");
      }
      if (size > r.remaining() || size % 2 != 0) {
        throw FormatError(FormatErrorCode::kTruncated, name + ": truncated data chunk");
      }
      wave.samples.resize(size / 2);
      for (float& s : wave.samples) s = static_cast<float>(r.i16()) / 32768.0f;
      if (wave.samples.empty()) {
        throw FormatError(FormatErrorCode::kTruncated, name + ": no samples");
      }
      return wave;
    } else {
      if (size + (size & 1) > r.remaining()) {
        throw FormatError(FormatErrorCode::kTruncated, name + ": truncated chunk");
      }
      r.skip(size + (size & 1));
    }
  }
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  if (wave.sample_rate <= 0) throw std::invalid_argument("write_wav: bad sample rate");
  const auto n = static_cast<uint32_t>(wave.samples.size());
  internal::ByteWriter w;
  w.str("RIFF");
  w.u32(36 + 2 * n);
  w.str("WAVE");
  w.str("fmt ");
  w.u32(16);
  w.u16(1);
  w.u16(1);
  w.u32(static_cast<uint32_t>(wave.sample_rate));
  w.u32(static_cast<uint32_t>(wave.sample_rate) * 2);
  w.u16(2);
  w.u16(16);
  w.str("data");
  w.u32(2 * n);
  for (float s : wave.samples) {
    const long q = std::lround(static_cast<double>(s) * 32768.0);
    w.i16(static_cast<int16_t>(std::clamp<long>(q, -32768, 32767)));
  }
  internal::write_file(path, w.bytes());
}

double synth_pitch_factor(const SynthSpec& spec, int speaker) {
  Rng rng(derive_seed(spec.seed, 0x5eed0000ULL + static_cast<uint64_t>(speaker)));
  return std::uniform_real_distribution<double>(0.9, 1.1)(rng);
}

Waveform synth_waveform(const SynthSpec& spec, int speaker, int index) {
  if (spec.classes.empty() || spec.duration_s <= 0.0 || spec.sample_rate <= 0) {
    throw std::invalid_argument("synth: invalid spec");
  }
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  const Emotion label = spec.classes[static_cast<size_t>(index) % spec.classes.size()];
  const double pitch = synth_pitch_factor(spec, speaker);
  Rng rng(derive_seed(derive_seed(spec.seed, static_cast<uint64_t>(speaker)),
                      static_cast<uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double amplitude = 0.3 + 0.3 * unit(rng);
  const double phase = kTwoPi * unit(rng);
  const double am_phase = kTwoPi * unit(rng);

  const auto n = static_cast<size_t>(std::llround(spec.duration_s * spec.sample_rate));
  const double sr = spec.sample_rate;
  std::vector<double> clean(n);
  for (size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    double s = 0.0;
    switch (label) {
      case Emotion::kAngry: {
        // Square-ish carrier with an 8 Hz tremor.
        const double carrier = std::tanh(4.0 * std::sin(kTwoPi * 220.0 * pitch * t + phase)) /
                               std::tanh(4.0);
        s = carrier * (0.6 + 0.4 * std::sin(kTwoPi * 8.0 * t + am_phase));
        break;
      }
      case Emotion::kHappy: {
        const double f0 = 300.0 * pitch;
        const double f1 = 900.0 * pitch;
        s = std::sin(kTwoPi * (f0 * t + (f1 - f0) * t * t / (2.0 * spec.duration_s)) + phase);
        break;
      }
      case Emotion::kSad:
        s = std::sin(kTwoPi * 150.0 * pitch * t + phase) *
            (0.6 + 0.4 * std::sin(kTwoPi * 2.0 * t + am_phase));
        break;
      case Emotion::kNeutral:
        s = std::sin(kTwoPi * 440.0 * pitch * t + phase);
        break;
    }
    clean[i] = amplitude * s;
  }
  double energy = 0.0;
  for (double s : clean) energy += s * s;
  const double rms = std::sqrt(energy / static_cast<double>(std::max<size_t>(n, 1)));
  // 20 dB SNR: noise RMS is a tenth of the signal RMS.
  std::normal_distribution<double> noise(0.0, rms / 10.0);
  Waveform wave;
  wave.sample_rate = spec.sample_rate;
  wave.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    wave.samples[i] = static_cast<float>(std::clamp(clean[i] + noise(rng), -1.0, 32767.0 / 32768.0));
  }
  return wave;
}

CorpusManifest synth_corpus(const SynthSpec& spec,
                            const std::filesystem::path& out_dir) {
  if (spec.n_speakers < 1 || spec.utterances_per_speaker < 1) {
    throw std::invalid_argument("synth: counts must be >= 1");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  CorpusManifest m;
  m.base_dir = out_dir;
  char buf[64];
  for (int s = 0; s < spec.n_speakers; ++s) {
    for (int u = 0; u < spec.utterances_per_speaker; ++u) {
      std::snprintf(buf, sizeof buf, "spk%02d_utt%03d", s + 1, u + 1);
      Utterance utt;
      utt.id = buf;
      utt.audio_path = utt.id + ".wav";
      std::snprintf(buf, sizeof buf, "spk%02d", s + 1);
      utt.speaker_id = buf;
      std::snprintf(buf, sizeof buf, "ses%02d", s / 2 + 1);
      utt.session_id = buf;
      utt.label = spec.classes[static_cast<size_t>(u) % spec.classes.size()];
      write_wav(out_dir / utt.audio_path, synth_waveform(spec, s, u));
      m.utterances.push_back(std::move(utt));
    }
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

Split split_speaker_independent(const CorpusManifest& m, int n_test_speakers) {
  const auto speakers = m.speakers();
  if (n_test_speakers < 1 ||
      static_cast<size_t>(n_test_speakers) >= speakers.size()) {
    throw std::invalid_argument(
        "split: need 1 <= n_test_speakers < " + std::to_string(speakers.size()) +
        " distinct speakers, got " + std::to_string(n_test_speakers));
  }
  const std::unordered_set<std::string> test_speakers(
      speakers.begin(), speakers.begin() + n_test_speakers);
  std::vector<Utterance> train, test;
  for (const Utterance& u : m.utterances) {
    (test_speakers.count(u.speaker_id) ? test : train).push_back(u);
  }
  return {with_utterances(m, std::move(train)), with_utterances(m, std::move(test))};
}

std::vector<Split> kfold_by_session(const CorpusManifest& m, int k) {
  if (k < 2) throw std::invalid_argument("kfold: k must be >= 2");
  const auto sessions = m.sessions();
  if (sessions.size() < static_cast<size_t>(k)) {
    throw std::invalid_argument("kfold: " + std::to_string(sessions.size()) +
                                " sessions is fewer than k=" + std::to_string(k));
  }
  std::unordered_map<std::string, int> fold_of;
  for (size_t i = 0; i < sessions.size(); ++i) {
    fold_of[sessions[i]] = static_cast<int>(i % static_cast<size_t>(k));
  }
  std::vector<Split> folds;
  for (int f = 0; f < k; ++f) {
    std::vector<Utterance> train, test;
    for (const Utterance& u : m.utterances) {
      (fold_of[u.session_id] == f ? test : train).push_back(u);
    }
    folds.emplace_back(with_utterances(m, std::move(train)),
                       with_utterances(m, std::move(test)));
  }
  return folds;
}

}  // namespace fopser
