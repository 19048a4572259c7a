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

#include <fftw3.h>

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "binary_io.h"
#include "fopser/errors.h"

namespace fopser {

namespace {

constexpr char kFeatureMagic[4] = {'F', 'O', 'P', 'F'};
constexpr uint32_t kFeatureVersion = 1;

// The FFTW planner is not re-entrant.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwPlanDeleter {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(p);
  }
};

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

}  // namespace

int FrameConfig::win_length() const {
  return static_cast<int>(std::lround(win_ms * sample_rate / 1000.0));
}

int FrameConfig::hop_length() const {
  return static_cast<int>(std::lround(hop_ms * sample_rate / 1000.0));
}

double FrameConfig::upper_hz() const {
  return fmax > 0.0 ? fmax : sample_rate / 2.0;
}

void FrameConfig::validate() const {
  if (sample_rate <= 0) throw std::invalid_argument("frame config: sample_rate must be > 0");
  if (win_length() < 1 || hop_length() < 1) {
    throw std::invalid_argument("frame config: window and hop must be >= 1 sample");
  }
  if (n_fft < win_length()) {
    throw std::invalid_argument("frame config: n_fft (" + std::to_string(n_fft) +
                                ") is shorter than the window (" +
                                std::to_string(win_length()) + " samples)");
  }
  if (n_mels < 1) throw std::invalid_argument("frame config: n_mels must be >= 1");
  if (!(fmin >= 0.0 && fmin < upper_hz() && upper_hz() <= sample_rate / 2.0)) {
    throw std::invalid_argument("frame config: need 0 <= fmin < fmax <= sample_rate/2");
  }
  if (!(log_floor > 0.0)) throw std::invalid_argument("frame config: log_floor must be > 0");
}

int frame_count(size_t n_samples, const FrameConfig& cfg) {
  const auto win = static_cast<size_t>(cfg.win_length());
  if (n_samples < win) return 0;
  return 1 + static_cast<int>((n_samples - win) / static_cast<size_t>(cfg.hop_length()));
}

Matrix<double> stft_magnitude(const Waveform& w, const FrameConfig& cfg) {
  cfg.validate();
  const int win = cfg.win_length();
  const int hop = cfg.hop_length();
  const int n_frames = frame_count(w.samples.size(), cfg);
  if (n_frames == 0) {
    throw std::invalid_argument("stft: waveform of " + std::to_string(w.samples.size()) +
                                " samples is shorter than one window (" +
                                std::to_string(win) + ")");
  }
  const int n_fft = cfg.n_fft;
  const int n_bins = cfg.n_bins();

  std::vector<double> window(static_cast<size_t>(win));
  for (int i = 0; i < win; ++i) {
    window[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / static_cast<double>(win));
  }

  std::unique_ptr<double, FftwFree> in(
      static_cast<double*>(fftw_malloc(sizeof(double) * static_cast<size_t>(n_fft))));
  std::unique_ptr<fftw_complex, FftwFree> out(static_cast<fftw_complex*>(
      fftw_malloc(sizeof(fftw_complex) * static_cast<size_t>(n_bins))));
  std::unique_ptr<fftw_plan_s, FftwPlanDeleter> plan;
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    plan.reset(fftw_plan_dft_r2c_1d(n_fft, in.get(), out.get(), FFTW_ESTIMATE));
  }

  Matrix<double> mag(n_frames, n_bins);
  for (int t = 0; t < n_frames; ++t) {
    const size_t start = static_cast<size_t>(t) * static_cast<size_t>(hop);
    for (int i = 0; i < n_fft; ++i) {
      in.get()[i] = i < win ? w.samples[start + static_cast<size_t>(i)] *
                                  window[static_cast<size_t>(i)]
                            : 0.0;
    }
    fftw_execute(plan.get());
    for (int k = 0; k < n_bins; ++k) {
      mag(t, k) = std::hypot(out.get()[k][0], out.get()[k][1]);
    }
  }
  return mag;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix<double> mel_filterbank(const FrameConfig& cfg) {
  cfg.validate();
  const int n_bins = cfg.n_bins();
  const double lo = hz_to_mel(cfg.fmin);
  const double hi = hz_to_mel(cfg.upper_hz());
  std::vector<double> edges(static_cast<size_t>(cfg.n_mels) + 2);
  for (size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) /
                                  static_cast<double>(cfg.n_mels + 1));
  }
  // Pin the outer edges so the mel round trip cannot leak weight past them.
  edges.front() = cfg.fmin;
  edges.back() = cfg.upper_hz();
  Matrix<double> fb = Matrix<double>::Zero(cfg.n_mels, n_bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[static_cast<size_t>(m)];
    const double center = edges[static_cast<size_t>(m) + 1];
    const double right = edges[static_cast<size_t>(m) + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      if (f <= left || f >= right) continue;
      fb(m, k) = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
    }
    if (!(fb.row(m).sum() > 0.0)) {
      throw std::invalid_argument(
          "mel filterbank: filter " + std::to_string(m) +
          " covers no FFT bin; widen [fmin, fmax], reduce n_mels or raise n_fft");
    }
  }
  return fb;
}

FeatureSequence log_mel(const Waveform& w, const FrameConfig& cfg) {
  if (w.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("log_mel: waveform rate " + std::to_string(w.sample_rate) +
                                " Hz does not match configured " +
                                std::to_string(cfg.sample_rate) + " Hz");
  }
  const Matrix<double> mag = stft_magnitude(w, cfg);
  const Matrix<double> fb = mel_filterbank(cfg);
  const Matrix<double> energies = mag * fb.transpose();
  FeatureSequence out;
  out.config = cfg;
  out.frames = (energies.array() + cfg.log_floor).log().cast<float>().matrix();
  return out;
}

NormStats fit_norm(std::span<const FeatureSequence> train) {
  if (train.empty()) throw std::invalid_argument("fit_norm: no sequences");
  const Eigen::Index d = train.front().dim();
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd sum_sq = Eigen::RowVectorXd::Zero(d);
  double count = 0.0;
  for (const FeatureSequence& f : train) {
    if (f.dim() != d) throw std::invalid_argument("fit_norm: inconsistent widths");
    const Eigen::MatrixXd x = f.frames.cast<double>();
    sum += x.colwise().sum();
    count += static_cast<double>(x.rows());
  }
  if (count < 2) throw std::invalid_argument("fit_norm: need at least 2 frames");
  const Eigen::RowVectorXd mean = sum / count;
  for (const FeatureSequence& f : train) {
    const Eigen::MatrixXd x = f.frames.cast<double>();
    sum_sq += (x.rowwise() - mean).array().square().colwise().sum().matrix();
  }
  NormStats stats;
  stats.mean = mean.cast<float>();
  stats.std = (sum_sq / count).array().sqrt().cast<float>().max(kNormStdFloor).matrix();
  return stats;
}

FeatureSequence apply_norm(const FeatureSequence& f, const NormStats& stats) {
  if (f.dim() != stats.mean.size() || f.dim() != stats.std.size()) {
    throw std::invalid_argument("apply_norm: width does not match stats");
  }
  FeatureSequence out;
  out.config = f.config;
  out.frames = ((f.frames.rowwise() - stats.mean).array().rowwise() /
                stats.std.array())
                   .matrix();
  return out;
}

void write_features(const FeatureSequence& f, const std::filesystem::path& path) {
  internal::ByteWriter w;
  w.raw(kFeatureMagic, 4);
  w.u32(kFeatureVersion);
  w.u32(static_cast<uint32_t>(f.frames.rows()));
  w.u32(static_cast<uint32_t>(f.frames.cols()));
  w.raw(f.frames.data(), sizeof(float) * static_cast<size_t>(f.frames.size()));
  internal::write_file(path, w.bytes());
}

FeatureSequence read_features(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = internal::read_file(path);
  const std::string name = path.string();
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    throw FormatError(FormatErrorCode::kBadMagic, name + ": not a FOPF feature file");
  }
  internal::ByteReader r(bytes.data(), bytes.size());
  r.skip(4);
  if (r.remaining() < 12) {
    throw FormatError(FormatErrorCode::kTruncated, name + ": truncated header");
  }
  const uint32_t version = r.u32();
  if (version != kFeatureVersion) {
    throw FormatError(FormatErrorCode::kVersionMismatch,
                      name + ": unsupported FOPF version " + std::to_string(version));
  }
  const uint32_t n_frames = r.u32();
  const uint32_t n_mels = r.u32();
  const uint64_t payload = uint64_t{n_frames} * n_mels * sizeof(float);
  if (payload > r.remaining()) {
    throw FormatError(FormatErrorCode::kTruncated,
                      name + ": header declares " + std::to_string(n_frames) + "x" +
                          std::to_string(n_mels) + " frames but payload is shorter");
  }
  if (payload < r.remaining()) {
    throw FormatError(FormatErrorCode::kTrailingData, name + ": bytes after payload");
  }
  FeatureSequence f;
  f.config.n_mels = static_cast<int>(n_mels);
  f.frames.resize(n_frames, n_mels);
  r.raw(f.frames.data(), static_cast<size_t>(payload));
  return f;
}

}  // namespace fopser
