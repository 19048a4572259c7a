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

#ifndef FOPSER_FEATURES_H_
#define FOPSER_FEATURES_H_

#include <filesystem>
#include <span>

#include "fopser/corpus.h"
#include "fopser/numerics.h"

namespace fopser {

struct FrameConfig {
  int sample_rate = 16000;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  int n_fft = 512;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 0.0;  // <= 0 means sample_rate / 2
  double log_floor = 1e-6;

  int win_length() const;
  int hop_length() const;
  double upper_hz() const;
  int n_bins() const { return n_fft / 2 + 1; }
  // Throws std::invalid_argument if any invariant is violated.
  void validate() const;
};

// Number of non-centered frames: 1 + floor((len - win) / hop), or 0 if the
// signal is shorter than one window.
int frame_count(size_t n_samples, const FrameConfig& cfg);

// Time-major T x n_mels log-mel frames.
struct FeatureSequence {
  Matrix<float> frames;
  FrameConfig config;

  Eigen::Index length() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

// Hann-windowed (periodic), non-centered magnitude spectra, T x (n_fft/2+1).
Matrix<double> stft_magnitude(const Waveform& w, const FrameConfig& cfg);

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// n_mels x (n_fft/2+1) triangular filters with centers equally spaced in mel
// between fmin and fmax. Throws if any filter covers no FFT bin.
Matrix<double> mel_filterbank(const FrameConfig& cfg);

// ln(filterbank * |STFT| + log_floor). The waveform's rate must equal
// cfg.sample_rate; there is no resampling.
FeatureSequence log_mel(const Waveform& w, const FrameConfig& cfg);

inline constexpr float kNormStdFloor = 1e-8f;

struct NormStats {
  RowVector<float> mean;
  RowVector<float> std;
};

// Pooled per-dimension mean and (population) std over every frame.
NormStats fit_norm(std::span<const FeatureSequence> train);
FeatureSequence apply_norm(const FeatureSequence& f, const NormStats& stats);

// "FOPF" v1: magic, u32 version, u32 n_frames, u32 n_mels, float32 payload.
void write_features(const FeatureSequence& f, const std::filesystem::path& path);
FeatureSequence read_features(const std::filesystem::path& path);

}  // namespace fopser

#endif  // FOPSER_FEATURES_H_
