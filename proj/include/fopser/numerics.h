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

#ifndef FOPSER_NUMERICS_H_
#define FOPSER_NUMERICS_H_

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fopser {

// Dense row-major tensors. Training runs in float; gradient checks in double.
// Vectors (biases, layer-norm gains) are stored as 1 x n matrices so that
// every parameter is visited through the same type.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Explicitly threaded through every stochastic operation; there is no global
// generator anywhere in the library.
using Rng = std::mt19937_64;

enum class Mode { kTrain, kEval };

// Mixes a base seed with a stream index into an independent 64-bit seed.
uint64_t derive_seed(uint64_t base, uint64_t stream);

// Numerically stable softmax (max subtraction).
template <typename T>
RowVector<T> softmax(const RowVector<T>& v);

// Row-wise softmax in place, restricted to columns [0, limit(row)) where
// limit(row) = row + 1 when `causal` is set. Masked entries become exactly 0.
template <typename T>
void softmax_rows(Matrix<T>& scores, bool causal);

template <typename T>
RowVector<T> layer_norm(const RowVector<T>& x, const RowVector<T>& gamma,
                        const RowVector<T>& beta, T eps = T(1e-5));

template <typename T>
struct LayerNormCache {
  Matrix<T> normalized;     // (x - mean) / sqrt(var + eps), per row
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

// Row-wise layer normalization (variance with 1/d). `gamma` and `beta` are
// 1 x d. Fills `cache` when non-null for the backward pass.
template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Matrix<T>& gamma,
                          const Matrix<T>& beta, T eps,
                          LayerNormCache<T>* cache);

// Accumulates into d_gamma / d_beta and returns the gradient w.r.t. x.
template <typename T>
Matrix<T> layer_norm_rows_backward(const Matrix<T>& d_out,
                                   const Matrix<T>& gamma,
                                   const LayerNormCache<T>& cache,
                                   Matrix<T>& d_gamma, Matrix<T>& d_beta);

// Inverted dropout mask: each entry is 0 with probability p, else 1/(1-p).
// Throws std::invalid_argument unless 0 <= p < 1.
template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p,
                       Rng& rng);

// Eval mode (or p == 0) returns x unchanged and leaves `mask` empty.
template <typename T>
Matrix<T> dropout(const Matrix<T>& x, double p, Mode mode, Rng& rng,
                  Matrix<T>* mask = nullptr);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  int64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
};

// One bias-corrected Adam update of every parameter. Moment buffers are
// allocated on the first call; any shape mismatch throws
// std::invalid_argument.
template <typename T>
void adam_step(std::span<Matrix<T>* const> params,
               std::span<const Matrix<T>* const> grads, AdamState<T>& state);

struct NamedParam {
  std::string name;
  Matrix<double>* value;
  const Matrix<double>* grad;
};

struct GradCheckOptions {
  double eps = 1e-4;
  double threshold = 1e-4;
  // 0 checks every coordinate; otherwise a seeded sample of this many
  // coordinates per tensor.
  size_t max_coords_per_tensor = 0;
  uint64_t seed = 0;
};

struct GradReport {
  struct Entry {
    std::string name;
    size_t coords_checked = 0;
    double max_rel_error = 0.0;
  };
  std::vector<Entry> entries;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

// Compares analytic gradients against central differences. `loss` must read
// the current parameter values; each coordinate is perturbed in place and
// restored. Relative error is |a - n| / max(|a|, |n|, 1e-8).
// Throws std::runtime_error if two evaluations at the same point disagree.
GradReport grad_check(const std::function<double()>& loss,
                      std::span<const NamedParam> params,
                      const GradCheckOptions& options = {});

}  // namespace fopser

#endif  // FOPSER_NUMERICS_H_
