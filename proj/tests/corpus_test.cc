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

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "fopser/errors.h"
#include "oracles.h"

namespace fopser {
namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

FormatErrorCode wav_error(const fs::path& p) {
  try {
    read_wav(p);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error for " << p;
  return FormatErrorCode::kIo;
}

TEST(EmotionTest, NamesRoundTrip) {
  for (Emotion e : kAllEmotions) EXPECT_EQ(parse_emotion(emotion_name(e)), e);
  EXPECT_FALSE(parse_emotion("excited").has_value());
  EXPECT_EQ(emotion_index(Emotion::kNeutral), 3);
}

TEST(ManifestTest, RoundTrip) {
  const fs::path dir = oracle::temp_dir("manifest_rt");
  CorpusManifest m;
  m.base_dir = dir;
  m.utterances.push_back({"a", "a.wav", "s1", "x1", Emotion::kSad});
  m.utterances.push_back({"b", "sub/b.wav", "s2", "x1", std::nullopt});
  write_manifest(dir / "m.csv", m);
  const CorpusManifest back = load_manifest(dir / "m.csv");
  EXPECT_EQ(back.utterances, m.utterances);
  EXPECT_FALSE(back.labeled());
  EXPECT_EQ(back.resolve(back.utterances[1]), dir / "sub/b.wav");
}

TEST(ManifestTest, HandlesCrLf) {
  const fs::path dir = oracle::temp_dir("manifest_crlf");
  write_text(dir / "m.csv", "id,path,speaker,session,label\r\nu1,u1.wav,s,x,angry\r\n");
  const CorpusManifest m = load_manifest(dir / "m.csv");
  ASSERT_EQ(m.utterances.size(), 1u);
  EXPECT_EQ(m.utterances[0].label, Emotion::kAngry);
  EXPECT_TRUE(m.labeled());
}

TEST(ManifestTest, Rejections) {
  const fs::path dir = oracle::temp_dir("manifest_bad");
  const std::string header = "id,path,speaker,session,label\n";
  const std::vector<std::string> bad = {
      "id,path,speaker\nu,u.wav,s\n",
      header + "u,u.wav,s\n",
      header + "u,u.wav,s,x,bored\n",
      header + "u,u.wav,s,x,sad\nu,v.wav,s,x,sad\n",
      header + ",u.wav,s,x,sad\n",
      header,
      "",
  };
  for (size_t i = 0; i < bad.size(); ++i) {
    write_text(dir / "m.csv", bad[i]);
    EXPECT_THROW(load_manifest(dir / "m.csv"), std::runtime_error) << "case " << i;
  }
  EXPECT_THROW(load_manifest(dir / "missing.csv"), std::runtime_error);
}

TEST(WavTest, RoundTripIsSampleExact) {
  const fs::path dir = oracle::temp_dir("wav_rt");
  Waveform w;
  w.sample_rate = 16000;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(std::round(std::sin(i * 0.01) * 20000) / 32768.0f);
  write_wav(dir / "a.wav", w);
  const Waveform back = read_wav(dir / "a.wav");
  EXPECT_EQ(back.sample_rate, 16000);
  EXPECT_EQ(back.samples, w.samples);
  EXPECT_EQ(fs::file_size(dir / "a.wav"), 44u + 2000u);
}

TEST(WavTest, ClampsOutOfRange) {
  const fs::path dir = oracle::temp_dir("wav_clamp");
  write_wav(dir / "a.wav", {{2.0f, -2.0f}, 8000});
  const Waveform back = read_wav(dir / "a.wav");
  EXPECT_FLOAT_EQ(back.samples[0], 32767.0f / 32768.0f);
  EXPECT_FLOAT_EQ(back.samples[1], -1.0f);
}

std::vector<uint8_t> wav_header(uint16_t format, uint16_t channels, uint16_t bits,
                                uint32_t data_bytes) {
  std::vector<uint8_t> b;
  auto u32 = [&](uint32_t v) { for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i))); };
  auto u16 = [&](uint16_t v) { b.push_back(static_cast<uint8_t>(v)); b.push_back(static_cast<uint8_t>(v >> 8)); };
  auto tag = [&](const char* s) { b.insert(b.end(), s, s + 4); };
  tag("RIFF"); u32(36 + data_bytes); tag("WAVE");
  tag("fmt "); u32(16); u16(format); u16(channels); u32(16000);
  u32(16000u * channels * bits / 8); u16(static_cast<uint16_t>(channels * bits / 8)); u16(bits);
  tag("data"); u32(data_bytes);
  return b;
}

void write_bytes(const fs::path& p, const std::vector<uint8_t>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()),
                                           static_cast<std::streamsize>(b.size()));
}

TEST(WavTest, DistinctErrors) {
  const fs::path dir = oracle::temp_dir("wav_bad");
  write_text(dir / "magic.wav", "RIFX0000WAVEfmt ");
  EXPECT_EQ(wav_error(dir / "magic.wav"), FormatErrorCode::kBadMagic);

  auto stereo = wav_header(1, 2, 16, 4);
  stereo.resize(stereo.size() + 4, 0);
  write_bytes(dir / "stereo.wav", stereo);
  EXPECT_EQ(wav_error(dir / "stereo.wav"), FormatErrorCode::kUnsupported);

  auto fl = wav_header(3, 1, 32, 4);
  fl.resize(fl.size() + 4, 0);
  write_bytes(dir / "float.wav", fl);
  EXPECT_EQ(wav_error(dir / "float.wav"), FormatErrorCode::kUnsupported);

  auto cut = wav_header(1, 1, 16, 100);
  cut.resize(cut.size() + 10, 0);
  write_bytes(dir / "cut.wav", cut);
  EXPECT_EQ(wav_error(dir / "cut.wav"), FormatErrorCode::kTruncated);
}

TEST(SynthTest, LayoutAndLabels) {
  const fs::path dir = oracle::temp_dir("synth_layout");
  SynthSpec spec;
  spec.n_speakers = 3;
  spec.utterances_per_speaker = 6;
  spec.duration_s = 0.25;
  const CorpusManifest m = synth_corpus(spec, dir);
  ASSERT_EQ(m.utterances.size(), 18u);
  EXPECT_EQ(m.speakers(), (std::vector<std::string>{"spk01", "spk02", "spk03"}));
  EXPECT_EQ(m.sessions(), (std::vector<std::string>{"ses01", "ses02"}));
  for (size_t i = 0; i < m.utterances.size(); ++i) {
    EXPECT_EQ(emotion_index(*m.utterances[i].label), static_cast<int>(i % 6 % 4));
  }
  const Waveform w = read_wav(m.resolve(m.utterances[0]));
  EXPECT_EQ(w.samples.size(), 4000u);
  EXPECT_EQ(load_manifest(dir / "manifest.csv").utterances, m.utterances);
}

TEST(SynthTest, SeededAndDistinct) {
  SynthSpec spec;
  spec.duration_s = 0.1;
  const Waveform a = synth_waveform(spec, 0, 0);
  EXPECT_EQ(a.samples, synth_waveform(spec, 0, 0).samples);
  EXPECT_NE(a.samples, synth_waveform(spec, 1, 0).samples);
  spec.seed = 9;
  EXPECT_NE(a.samples, synth_waveform(spec, 0, 0).samples);
  for (int s = 0; s < 8; ++s) {
    const double p = synth_pitch_factor(spec, s);
    EXPECT_GE(p, 0.9);
    EXPECT_LE(p, 1.1);
  }
}

TEST(SynthTest, SnrNearTwentyDb) {
  SynthSpec spec;
  // Index 3 is neutral: a pure tone at 440 * pitch. Least-squares fit of a
  // sin/cos pair at that frequency; the residual is the added noise.
  const Waveform w = synth_waveform(spec, 0, 3);
  const double f = 440.0 * synth_pitch_factor(spec, 0);
  double ss = 0, cc = 0, sc = 0, xs = 0, xc = 0;
  for (size_t i = 0; i < w.samples.size(); ++i) {
    const double t = static_cast<double>(i) / spec.sample_rate;
    const double s = std::sin(2 * M_PI * f * t), c = std::cos(2 * M_PI * f * t);
    ss += s * s; cc += c * c; sc += s * c; xs += w.samples[i] * s; xc += w.samples[i] * c;
  }
  const double det = ss * cc - sc * sc;
  const double a = (xs * cc - xc * sc) / det, b = (xc * ss - xs * sc) / det;
  double sig = 0, res = 0;
  for (size_t i = 0; i < w.samples.size(); ++i) {
    const double t = static_cast<double>(i) / spec.sample_rate;
    const double fit = a * std::sin(2 * M_PI * f * t) + b * std::cos(2 * M_PI * f * t);
    sig += fit * fit;
    res += (w.samples[i] - fit) * (w.samples[i] - fit);
  }
  EXPECT_NEAR(10 * std::log10(sig / res), 20.0, 0.5);
}

CorpusManifest toy_manifest(int speakers, int per) {
  CorpusManifest m;
  for (int s = 0; s < speakers; ++s)
    for (int u = 0; u < per; ++u) {
      const std::string id = "s" + std::to_string(s) + "u" + std::to_string(u);
      m.utterances.push_back({id, id + ".wav", "spk" + std::to_string(s),
                              "ses" + std::to_string(s / 2), Emotion::kSad});
    }
  return m;
}

TEST(SplitTest, FirstSpeakersAreHeldOut) {
  const CorpusManifest m = toy_manifest(5, 3);
  const Split s = split_speaker_independent(m, 2);
  EXPECT_EQ(s.second.speakers(), (std::vector<std::string>{"spk0", "spk1"}));
  EXPECT_EQ(s.first.utterances.size(), 9u);
  EXPECT_THROW(split_speaker_independent(m, 5), std::invalid_argument);
  EXPECT_THROW(split_speaker_independent(m, 0), std::invalid_argument);
}

TEST(SplitTest, SessionFoldsPartitionCorpus) {
  const CorpusManifest m = toy_manifest(10, 2);  // 5 sessions
  const std::vector<Split> folds = kfold_by_session(m, 5);
  ASSERT_EQ(folds.size(), 5u);
  std::multiset<std::string> tested;
  for (const Split& f : folds) {
    EXPECT_EQ(f.second.sessions().size(), 1u);
    EXPECT_EQ(f.first.utterances.size() + f.second.utterances.size(), 20u);
    for (const Utterance& u : f.second.utterances) tested.insert(u.id);
    for (const Utterance& u : f.first.utterances)
      EXPECT_NE(u.session_id, f.second.utterances[0].session_id);
  }
  EXPECT_EQ(tested.size(), 20u);
  EXPECT_EQ(std::set<std::string>(tested.begin(), tested.end()).size(), 20u);
  EXPECT_THROW(kfold_by_session(m, 6), std::invalid_argument);
  EXPECT_THROW(kfold_by_session(m, 1), std::invalid_argument);
}

}  // namespace
}  // namespace fopser
