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

#include "fopser/numerics.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fopser {

uint64_t derive_seed(uint64_t base, uint64_t stream) {
  // splitmix64 finalizer over the combined words.
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
RowVector<T> softmax(const RowVector<T>& v) {
  if (v.size() == 0) return v;
  const T max = v.maxCoeff();
  RowVector<T> out = (v.array() - max).exp().matrix();
  out /= out.sum();
  return out;
}

template <typename T>
void softmax_rows(Matrix<T>& scores, bool causal) {
  const Eigen::Index cols = scores.cols();
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(r + 1, cols) : cols;
    auto live = scores.row(r).head(limit);
    const T max = live.maxCoeff();
    live = (live.array() - max).exp().matrix();
    live /= live.sum();
    if (limit < cols) scores.row(r).tail(cols - limit).setZero();
  }
}

template <typename T>
RowVector<T> layer_norm(const RowVector<T>& x, const RowVector<T>& gamma,
                        const RowVector<T>& beta, T eps) {
  if (x.size() != gamma.size() || x.size() != beta.size()) {
    throw std::invalid_argument("layer_norm: dimension mismatch");
  }
  Matrix<T> out = layer_norm_rows<T>(x, gamma, beta, eps, nullptr);
  return out.row(0);
}

template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Matrix<T>& gamma,
                          const Matrix<T>& beta, T eps,
                          LayerNormCache<T>* cache) {
  const Eigen::Index d = x.cols();
  Matrix<T> normalized(x.rows(), d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(d);
    inv_std(r) = T(1) / std::sqrt(var + eps);
    normalized.row(r) = centered * inv_std(r);
  }
  Matrix<T> out = (normalized.array().rowwise() * gamma.row(0).array()).matrix();
  out.rowwise() += beta.row(0);
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
Matrix<T> layer_norm_rows_backward(const Matrix<T>& d_out,
                                   const Matrix<T>& gamma,
                                   const LayerNormCache<T>& cache,
                                   Matrix<T>& d_gamma, Matrix<T>& d_beta) {
  const auto& xhat = cache.normalized;
  d_gamma += (d_out.array() * xhat.array()).colwise().sum().matrix();
  d_beta += d_out.colwise().sum();
  const Matrix<T> d_xhat =
      (d_out.array().rowwise() * gamma.row(0).array()).matrix();
  const T inv_d = T(1) / static_cast<T>(xhat.cols());
  Matrix<T> d_x(xhat.rows(), xhat.cols());
  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
    const T mean_dxhat = d_xhat.row(r).sum() * inv_d;
    const T mean_dxhat_xhat = d_xhat.row(r).dot(xhat.row(r)) * inv_d;
    d_x.row(r) = ((d_xhat.row(r).array() - mean_dxhat -
                   xhat.row(r).array() * mean_dxhat_xhat) *
                  cache.inv_std(r))
                     .matrix();
  }
  return d_x;
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p,
                       Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: p must satisfy 0 <= p < 1");
  }
  Matrix<T> mask(rows, cols);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::bernoulli_distribution drop(p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = drop(rng) ? T(0) : keep_scale;
  }
  return mask;
}

template <typename T>
Matrix<T> dropout(const Matrix<T>& x, double p, Mode mode, Rng& rng,
                  Matrix<T>* mask) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: p must satisfy 0 <= p < 1");
  }
  if (mask != nullptr) mask->resize(0, 0);
  if (mode == Mode::kEval || p == 0.0) return x;
  Matrix<T> m = dropout_mask<T>(x.rows(), x.cols(), p, rng);
  Matrix<T> out = x.cwiseProduct(m);
  if (mask != nullptr) *mask = std::move(m);
  return out;
}

template <typename T>
void adam_step(std::span<Matrix<T>* const> params,
               std::span<const Matrix<T>* const> grads, AdamState<T>& state) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: params/grads count mismatch");
  }
  if (state.m.empty() && !params.empty()) {
    for (const Matrix<T>* p : params) {
      state.m.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
      state.v.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match params");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i]->rows() ||
        params[i]->cols() != grads[i]->cols() ||
        params[i]->rows() != state.m[i].rows() ||
        params[i]->cols() != state.m[i].cols()) {
      throw std::invalid_argument("adam_step: shape mismatch");
    }
  }
  const AdamOptions& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  const T b1 = static_cast<T>(o.beta1);
  const T b2 = static_cast<T>(o.beta2);
  const T step_size = static_cast<T>(o.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(o.eps);
  for (size_t i = 0; i < params.size(); ++i) {
    auto g = grads[i]->array();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g * g;
    params[i]->array() -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
  }
}

GradReport grad_check(const std::function<double()>& loss,
                      std::span<const NamedParam> params,
                      const GradCheckOptions& options) {
  const double base = loss();
  if (loss() != base) {
    throw std::runtime_error(
        "grad_check: loss is not deterministic (disable dropout)");
  }
  GradReport report;
  report.threshold = options.threshold;
  Rng rng(options.seed);
  for (const NamedParam& p : params) {
    if (p.value->rows() != p.grad->rows() || p.value->cols() != p.grad->cols()) {
      throw std::invalid_argument("grad_check: gradient shape mismatch for " +
                                  p.name);
    }
    const Eigen::Index n = p.value->size();
    std::vector<Eigen::Index> coords(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    if (options.max_coords_per_tensor > 0 &&
        coords.size() > options.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
    }
    GradReport::Entry entry{p.name, coords.size(), 0.0};
    double* data = p.value->data();
    for (Eigen::Index c : coords) {
      const double saved = data[c];
      data[c] = saved + options.eps;
      const double plus = loss();
      data[c] = saved - options.eps;
      const double minus = loss();
      data[c] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double analytic = p.grad->data()[c];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      entry.max_rel_error =
          std::max(entry.max_rel_error, std::abs(analytic - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= options.threshold;
  return report;
}

#define FOPSER_INSTANTIATE(T)                                                \
  template RowVector<T> softmax<T>(const RowVector<T>&);                     \
  template void softmax_rows<T>(Matrix<T>&, bool);                           \
  template RowVector<T> layer_norm<T>(const RowVector<T>&,                   \
                                      const RowVector<T>&,                   \
                                      const RowVector<T>&, T);               \
  template Matrix<T> layer_norm_rows<T>(const Matrix<T>&, const Matrix<T>&,  \
                                        const Matrix<T>&, T,                 \
                                        LayerNormCache<T>*);                 \
  template Matrix<T> layer_norm_rows_backward<T>(                            \
      const Matrix<T>&, const Matrix<T>&, const LayerNormCache<T>&,          \
      Matrix<T>&, Matrix<T>&);                                               \
  template Matrix<T> dropout_mask<T>(Eigen::Index, Eigen::Index, double,     \
                                     Rng&);                                  \
  template Matrix<T> dropout<T>(const Matrix<T>&, double, Mode, Rng&,        \
                                Matrix<T>*);                                 \
  template void adam_step<T>(std::span<Matrix<T>* const>,                    \
                             std::span<const Matrix<T>* const>,              \
                             AdamState<T>&);

FOPSER_INSTANTIATE(float)
FOPSER_INSTANTIATE(double)
#undef FOPSER_INSTANTIATE

}  // namespace fopser
