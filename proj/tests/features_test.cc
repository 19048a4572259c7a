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

#include "fopser/features.h"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "fopser/errors.h"
#include "oracles.h"

namespace fopser {
namespace {

namespace fs = std::filesystem;

Waveform noise(size_t n, uint64_t seed, int rate = 16000) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  Waveform w;
  w.sample_rate = rate;
  for (size_t i = 0; i < n; ++i) w.samples.push_back(u(rng));
  return w;
}

TEST(FrameConfigTest, DefaultGeometry) {
  FrameConfig c;
  EXPECT_EQ(c.win_length(), 400);
  EXPECT_EQ(c.hop_length(), 160);
  EXPECT_EQ(c.n_bins(), 257);
  EXPECT_DOUBLE_EQ(c.upper_hz(), 8000.0);
  EXPECT_EQ(frame_count(16000, c), 98);
  EXPECT_EQ(frame_count(399, c), 0);
  EXPECT_EQ(frame_count(400, c), 1);
  EXPECT_EQ(frame_count(560, c), 2);
}

TEST(FrameConfigTest, Validation) {
  FrameConfig c;
  c.n_fft = 256;  // shorter than the 400-sample window
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.fmax = 9000;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(StftTest, MatchesDirectDft) {
  const FrameConfig cfg;
  const Waveform w = noise(1000, 5);
  const Matrix<double> mag = stft_magnitude(w, cfg);
  ASSERT_EQ(mag.rows(), frame_count(1000, cfg));
  ASSERT_EQ(mag.cols(), 257);
  for (int t : {0, 2, 3}) {
    std::vector<double> frame(400);
    for (int i = 0; i < 400; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2 * M_PI * i / 400.0);
      frame[static_cast<size_t>(i)] = w.samples[static_cast<size_t>(t * 160 + i)] * hann;
    }
    const std::vector<double> ref = oracle::dft_magnitude(frame, 512);
    for (int k = 0; k < 257; ++k) EXPECT_NEAR(mag(t, k), ref[static_cast<size_t>(k)], 1e-9);
  }
}

TEST(StftTest, PureToneSitsInItsBin) {
  Waveform w;
  w.sample_rate = 16000;
  // Bin 32 of a 512-point FFT at 16 kHz is 1000 Hz.
  for (int i = 0; i < 1600; ++i) w.samples.push_back(static_cast<float>(std::sin(2 * M_PI * 1000 * i / 16000.0)));
  const Matrix<double> mag = stft_magnitude(w, {});
  Eigen::Index arg;
  mag.row(3).maxCoeff(&arg);
  EXPECT_EQ(arg, 32);
}

TEST(StftTest, ShortInputThrows) {
  EXPECT_THROW(stft_magnitude(noise(100, 1), {}), std::invalid_argument);
}

TEST(MelTest, HtkScale) {
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-9);
  EXPECT_NEAR(hz_to_mel(700.0), 781.17, 0.01);
  EXPECT_DOUBLE_EQ(hz_to_mel(0.0), 0.0);
  for (double hz : {50.0, 440.0, 3000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
}

TEST(MelTest, FilterbankShape) {
  const Matrix<double> fb = mel_filterbank({});
  ASSERT_EQ(fb.rows(), 80);
  ASSERT_EQ(fb.cols(), 257);
  EXPECT_GE(fb.minCoeff(), 0.0);
  EXPECT_LE(fb.maxCoeff(), 1.0);
  Eigen::Index prev = -1;
  for (int m = 0; m < 80; ++m) {
    EXPECT_GT(fb.row(m).sum(), 0.0) << "filter " << m;
    Eigen::Index peak;
    fb.row(m).maxCoeff(&peak);
    EXPECT_GE(peak, prev);
    prev = peak;
  }
  // Triangles at bin k reach zero at the neighbouring centres.
  EXPECT_EQ(fb(0, 0), 0.0);
  EXPECT_EQ(fb(79, 256), 0.0);
}

TEST(MelTest, DegenerateFilterbankThrows) {
  FrameConfig c;
  c.n_mels = 200;
  c.fmax = 1000;
  EXPECT_THROW(mel_filterbank(c), std::invalid_argument);
}

TEST(LogMelTest, ShapeAndFloor) {
  Waveform silent;
  silent.sample_rate = 16000;
  silent.samples.assign(16000, 0.0f);
  const FeatureSequence f = log_mel(silent, {});
  EXPECT_EQ(f.length(), 98);
  EXPECT_EQ(f.dim(), 80);
  EXPECT_NEAR(f.frames(0, 0), std::log(1e-6), 1e-5);
  EXPECT_NEAR(f.frames.maxCoeff(), std::log(1e-6), 1e-5);
}

TEST(LogMelTest, EqualsFilterbankOfDirectDft) {
  const FrameConfig cfg;
  const Waveform w = noise(800, 11);
  const FeatureSequence f = log_mel(w, cfg);
  const Matrix<double> fb = mel_filterbank(cfg);
  std::vector<double> frame(400);
  for (int i = 0; i < 400; ++i)
    frame[static_cast<size_t>(i)] = w.samples[static_cast<size_t>(160 + i)] * (0.5 - 0.5 * std::cos(2 * M_PI * i / 400.0));
  const std::vector<double> mag = oracle::dft_magnitude(frame, 512);
  for (int m = 0; m < 80; ++m) {
    double e = 0;
    for (int k = 0; k < 257; ++k) e += fb(m, k) * mag[static_cast<size_t>(k)];
    EXPECT_NEAR(f.frames(1, m), std::log(e + 1e-6), 1e-5);
  }
}

TEST(LogMelTest, SampleRateMismatchThrows) {
  EXPECT_THROW(log_mel(noise(8000, 1, 8000), {}), std::invalid_argument);
}

TEST(NormTest, FitAndApply) {
  FeatureSequence a, b;
  a.frames.resize(2, 2);
  a.frames << 1, 5, 3, 5;
  b.frames.resize(2, 2);
  b.frames << 5, 5, 7, 5;
  const std::vector<FeatureSequence> seqs{a, b};
  const NormStats s = fit_norm(seqs);
  EXPECT_FLOAT_EQ(s.mean(0), 4.0f);
  EXPECT_FLOAT_EQ(s.mean(1), 5.0f);
  EXPECT_FLOAT_EQ(s.std(0), std::sqrt(5.0f));  // population std
  EXPECT_FLOAT_EQ(s.std(1), kNormStdFloor);
  const FeatureSequence n = apply_norm(a, s);
  EXPECT_FLOAT_EQ(n.frames(0, 0), -3.0f / std::sqrt(5.0f));
  EXPECT_FLOAT_EQ(n.frames(1, 1), 0.0f);
}

TEST(NormTest, Errors) {
  EXPECT_THROW(fit_norm(std::vector<FeatureSequence>{}), std::invalid_argument);
  FeatureSequence one;
  one.frames = Matrix<float>::Ones(1, 3);
  EXPECT_THROW(fit_norm(std::vector<FeatureSequence>{one}), std::invalid_argument);
}

FormatErrorCode read_error(const fs::path& p) {
  try {
    read_features(p);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error";
  return FormatErrorCode::kIo;
}

TEST(FeatureFileTest, RoundTripBitwise) {
  const fs::path dir = oracle::temp_dir("fopf");
  const FeatureSequence f = log_mel(noise(4000, 2), {});
  write_features(f, dir / "a.fopf");
  const FeatureSequence back = read_features(dir / "a.fopf");
  EXPECT_EQ(back.frames, f.frames);
  EXPECT_EQ(back.config.n_mels, 80);
  write_features(back, dir / "b.fopf");
  std::ifstream x(dir / "a.fopf", std::ios::binary), y(dir / "b.fopf", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(x), {}),
            std::string(std::istreambuf_iterator<char>(y), {}));
  EXPECT_EQ(fs::file_size(dir / "a.fopf"), 16u + 4u * static_cast<uint64_t>(f.frames.size()));
}

TEST(FeatureFileTest, CorruptionErrors) {
  const fs::path dir = oracle::temp_dir("fopf_bad");
  FeatureSequence f;
  f.frames = Matrix<float>::Ones(3, 4);
  write_features(f, dir / "ok.fopf");
  std::ifstream in(dir / "ok.fopf", std::ios::binary);
  const std::string good(std::istreambuf_iterator<char>(in), {});
  auto put = [&](const std::string& name, std::string bytes) {
    std::ofstream(dir / name, std::ios::binary) << bytes;
    return dir / name;
  };
  std::string s = good;
  s[0] = 'X';
  EXPECT_EQ(read_error(put("magic", s)), FormatErrorCode::kBadMagic);
  s = good;
  s[4] = 2;
  EXPECT_EQ(read_error(put("ver", s)), FormatErrorCode::kVersionMismatch);
  EXPECT_EQ(read_error(put("short", good.substr(0, good.size() - 1))), FormatErrorCode::kTruncated);
  EXPECT_EQ(read_error(put("long", good + "x")), FormatErrorCode::kTrailingData);
  EXPECT_EQ(read_error(put("hdr", good.substr(0, 10))), FormatErrorCode::kTruncated);
  EXPECT_EQ(read_error(dir / "missing"), FormatErrorCode::kIo);
}

}  // namespace
}  // namespace fopser
