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

#include "fopser/fop_model.h"

#include <cmath>
#include <stdexcept>

namespace fopser {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

template <typename T>
Matrix<T> gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
void require_shape(const Matrix<T>& m, Eigen::Index rows, Eigen::Index cols,
                   const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw std::invalid_argument(
        name + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
        ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

// Applies a dropout mask if one was drawn (train mode), identity otherwise.
template <typename T>
Matrix<T> apply_mask(const Matrix<T>& x, const Matrix<T>& mask) {
  return mask.size() == 0 ? x : Matrix<T>(x.cwiseProduct(mask));
}

template <typename T>
Matrix<T> draw_and_apply(const Matrix<T>& x, const FopConfig& cfg, Mode mode,
                         Rng& rng, Matrix<T>* mask_out) {
  Matrix<T> mask;
  Matrix<T> y = dropout(x, cfg.dropout_p, mode, rng, &mask);
  if (mask_out != nullptr) *mask_out = std::move(mask);
  return y;
}

template <typename T>
Matrix<T> attention_backward(const Matrix<T>& d_out,
                             const AttentionLayerParams<T>& layer,
                             const AttentionCache<T>& cache,
                             const FopConfig& cfg,
                             AttentionLayerParams<T>& grads) {
  const int dh = cfg.d_head();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  grads.w_output.noalias() += cache.context.transpose() * d_out;
  const Matrix<T> d_context = d_out * layer.w_output.transpose();

  const Eigen::Index len = cache.input.rows();
  Matrix<T> d_query(len, cfg.d_model), d_key(len, cfg.d_model),
      d_value(len, cfg.d_model);
  for (int head = 0; head < cfg.n_heads; ++head) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(head) * dh;
    const Matrix<T>& probs = cache.probs[static_cast<size_t>(head)];
    const Matrix<T> used =
        cache.prob_masks.empty()
            ? probs
            : Matrix<T>(probs.cwiseProduct(cache.prob_masks[static_cast<size_t>(head)]));
    const auto d_head_out = d_context.middleCols(c0, dh);
    d_value.middleCols(c0, dh).noalias() = used.transpose() * d_head_out;
    Matrix<T> d_probs = d_head_out * cache.value.middleCols(c0, dh).transpose();
    if (!cache.prob_masks.empty()) {
      d_probs.array() *= cache.prob_masks[static_cast<size_t>(head)].array();
    }
    // Softmax backward; masked entries have probs == 0 and drop out.
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot =
        (d_probs.array() * probs.array()).rowwise().sum();
    Matrix<T> d_scores =
        (probs.array() * (d_probs.array().colwise() - row_dot.array())).matrix() * scale;
    d_query.middleCols(c0, dh).noalias() = d_scores * cache.key.middleCols(c0, dh);
    d_key.middleCols(c0, dh).noalias() =
        d_scores.transpose() * cache.query.middleCols(c0, dh);
  }
  grads.w_query.noalias() += cache.input.transpose() * d_query;
  grads.w_key.noalias() += cache.input.transpose() * d_key;
  grads.w_value.noalias() += cache.input.transpose() * d_value;
  Matrix<T> d_input = d_query * layer.w_query.transpose();
  d_input.noalias() += d_key * layer.w_key.transpose();
  d_input.noalias() += d_value * layer.w_value.transpose();
  return d_input;
}

template <typename T>
Matrix<T> attention_layer_backward(const Matrix<T>& d_out,
                                   const AttentionLayerParams<T>& layer,
                                   const LayerCache<T>& cache,
                                   const FopConfig& cfg,
                                   AttentionLayerParams<T>& grads) {
  const Matrix<T> d_r2 = layer_norm_rows_backward(d_out, layer.ln2_gamma, cache.ln2,
                                                  grads.ln2_gamma, grads.ln2_beta);
  Matrix<T> d_mid = d_r2;
  const Matrix<T> d_ff_out = apply_mask(d_r2, cache.ff_drop);
  grads.w_ff2.noalias() += cache.ff_act.transpose() * d_ff_out;
  grads.b_ff2 += d_ff_out.colwise().sum();
  Matrix<T> d_ff_pre = d_ff_out * layer.w_ff2.transpose();
  d_ff_pre.array() *= (cache.ff_pre.array() > T(0)).template cast<T>();
  grads.w_ff1.noalias() += cache.mid.transpose() * d_ff_pre;
  grads.b_ff1 += d_ff_pre.colwise().sum();
  d_mid.noalias() += d_ff_pre * layer.w_ff1.transpose();

  const Matrix<T> d_r1 = layer_norm_rows_backward(d_mid, layer.ln1_gamma, cache.ln1,
                                                  grads.ln1_gamma, grads.ln1_beta);
  Matrix<T> d_in = d_r1;
  d_in += attention_backward(apply_mask(d_r1, cache.attn_drop), layer, cache.attn, cfg, grads);
  return d_in;
}

}  // namespace

void FopConfig::validate() const {
  if (d_feat < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || n_layers < 0 ||
      max_len < 1) {
    throw std::invalid_argument("fop config: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("fop config: d_model (" + std::to_string(d_model) +
                                ") is not divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw std::invalid_argument("fop config: dropout_p must satisfy 0 <= p < 1");
  }
}

FopConfig FopConfig::hypercolumn_add_compat() {
  FopConfig cfg;
  cfg.d_model = 80;
  cfg.n_heads = 4;
  cfg.d_ff = 160;
  return cfg;
}

template <typename T>
FopParams<T> FopParams<T>::zeros(const FopConfig& cfg) {
  cfg.validate();
  using M = Matrix<T>;
  FopParams<T> p;
  p.w_embed = M::Zero(cfg.d_feat, cfg.d_model);
  for (int l = 0; l < cfg.n_layers; ++l) {
    AttentionLayerParams<T> a;
    a.w_query = M::Zero(cfg.d_model, cfg.d_model);
    a.w_key = M::Zero(cfg.d_model, cfg.d_model);
    a.w_value = M::Zero(cfg.d_model, cfg.d_model);
    a.w_output = M::Zero(cfg.d_model, cfg.d_model);
    a.w_ff1 = M::Zero(cfg.d_model, cfg.d_ff);
    a.b_ff1 = M::Zero(1, cfg.d_ff);
    a.w_ff2 = M::Zero(cfg.d_ff, cfg.d_model);
    a.b_ff2 = M::Zero(1, cfg.d_model);
    a.ln1_gamma = M::Zero(1, cfg.d_model);
    a.ln1_beta = M::Zero(1, cfg.d_model);
    a.ln2_gamma = M::Zero(1, cfg.d_model);
    a.ln2_beta = M::Zero(1, cfg.d_model);
    p.layers.push_back(std::move(a));
  }
  p.w_out = M::Zero(cfg.d_model, cfg.d_feat);
  p.b_out = M::Zero(1, cfg.d_feat);
  return p;
}

template <typename T>
std::vector<ParamRef<T>> FopParams<T>::refs() {
  std::vector<ParamRef<T>> r;
  r.push_back({"embed.W", &w_embed, false});
  for (size_t l = 0; l < layers.size(); ++l) {
    auto& a = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    r.push_back({p + "attn.W_q", &a.w_query, false});
    r.push_back({p + "attn.W_k", &a.w_key, false});
    r.push_back({p + "attn.W_v", &a.w_value, false});
    r.push_back({p + "attn.W_o", &a.w_output, false});
    r.push_back({p + "ff.W1", &a.w_ff1, false});
    r.push_back({p + "ff.b1", &a.b_ff1, true});
    r.push_back({p + "ff.W2", &a.w_ff2, false});
    r.push_back({p + "ff.b2", &a.b_ff2, true});
    r.push_back({p + "ln1.gamma", &a.ln1_gamma, true});
    r.push_back({p + "ln1.beta", &a.ln1_beta, true});
    r.push_back({p + "ln2.gamma", &a.ln2_gamma, true});
    r.push_back({p + "ln2.beta", &a.ln2_beta, true});
  }
  r.push_back({"out.W", &w_out, false});
  r.push_back({"out.b", &b_out, true});
  return r;
}

template <typename T>
std::vector<ConstParamRef<T>> FopParams<T>::refs() const {
  std::vector<ConstParamRef<T>> out;
  for (const ParamRef<T>& r : const_cast<FopParams<T>*>(this)->refs()) {
    out.push_back({r.name, r.tensor, r.is_vector});
  }
  return out;
}

template <typename T>
void check_shapes(const FopParams<T>& params, const FopConfig& cfg) {
  if (params.layers.size() != static_cast<size_t>(cfg.n_layers)) {
    throw std::invalid_argument("params: expected " + std::to_string(cfg.n_layers) +
                                " layers, got " + std::to_string(params.layers.size()));
  }
  const FopParams<T> expected = FopParams<T>::zeros(cfg);
  const auto want = expected.refs();
  const auto have = params.refs();
  for (size_t i = 0; i < want.size(); ++i) {
    require_shape(*have[i].tensor, want[i].tensor->rows(), want[i].tensor->cols(),
                  have[i].name);
  }
}

template <typename T>
FopParams<T> init_params(const FopConfig& cfg, Rng& rng) {
  FopParams<T> p = FopParams<T>::zeros(cfg);
  p.w_embed = gaussian<T>(cfg.d_feat, cfg.d_model, rng);
  for (auto& a : p.layers) {
    a.w_query = gaussian<T>(cfg.d_model, cfg.d_model, rng);
    a.w_key = gaussian<T>(cfg.d_model, cfg.d_model, rng);
    a.w_value = gaussian<T>(cfg.d_model, cfg.d_model, rng);
    a.w_output = gaussian<T>(cfg.d_model, cfg.d_model, rng);
    a.w_ff1 = gaussian<T>(cfg.d_model, cfg.d_ff, rng);
    a.w_ff2 = gaussian<T>(cfg.d_ff, cfg.d_model, rng);
    a.ln1_gamma.setOnes();
    a.ln2_gamma.setOnes();
  }
  p.w_out = gaussian<T>(cfg.d_model, cfg.d_feat, rng);
  return p;
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> CausalMask::dense() const {
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> m(size_, size_);
  for (Eigen::Index q = 0; q < size_; ++q) {
    for (Eigen::Index k = 0; k < size_; ++k) m(q, k) = allowed(q, k);
  }
  return m;
}

template <typename T>
Matrix<T> positional_encoding(Eigen::Index length, int d_model) {
  Matrix<T> pe(length, d_model);
  for (int c = 0; c < d_model; ++c) {
    const int pair = c / 2;
    const double inv_freq = std::pow(10000.0, -2.0 * pair / static_cast<double>(d_model));
    for (Eigen::Index pos = 0; pos < length; ++pos) {
      const double angle = static_cast<double>(pos) * inv_freq;
      pe(pos, c) = static_cast<T>(c % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
Matrix<T> embed_inputs(const Matrix<T>& features, const FopParams<T>& params,
                       const FopConfig& cfg, Mode mode, Rng& rng,
                       Matrix<T>* drop_mask) {
  if (features.cols() != cfg.d_feat) {
    throw std::invalid_argument("embed: frame width " + std::to_string(features.cols()) +
                                " does not match d_feat " + std::to_string(cfg.d_feat));
  }
  if (features.rows() > cfg.max_len) {
    throw std::invalid_argument("embed: sequence of " + std::to_string(features.rows()) +
                                " frames exceeds max_len " + std::to_string(cfg.max_len));
  }
  Matrix<T> z = features * params.w_embed;
  if (cfg.positional_encoding) z += positional_encoding<T>(features.rows(), cfg.d_model);
  return draw_and_apply(z, cfg, mode, rng, drop_mask);
}

template <typename T>
Matrix<T> masked_multi_head_attention(const Matrix<T>& h,
                                      const AttentionLayerParams<T>& layer,
                                      const CausalMask& mask,
                                      const FopConfig& cfg, Mode mode, Rng& rng,
                                      AttentionCache<T>* cache) {
  cfg.validate();
  if (mask.size() != h.rows() || h.cols() != cfg.d_model) {
    throw std::invalid_argument("attention: input/mask shape mismatch");
  }
  const int dh = cfg.d_head();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> query = h * layer.w_query;
  Matrix<T> key = h * layer.w_key;
  Matrix<T> value = h * layer.w_value;
  Matrix<T> context(h.rows(), cfg.d_model);
  std::vector<Matrix<T>> probs_per_head, masks_per_head;
  for (int head = 0; head < cfg.n_heads; ++head) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(head) * dh;
    Matrix<T> probs = (query.middleCols(c0, dh) * key.middleCols(c0, dh).transpose()) * scale;
    softmax_rows(probs, /*causal=*/true);
    Matrix<T> drop;
    const Matrix<T> used = dropout(probs, cfg.dropout_p, mode, rng, &drop);
    // Only the lower triangle is read, so future rows of V never enter.
    context.middleCols(c0, dh).noalias() =
        used.template triangularView<Eigen::Lower>() * value.middleCols(c0, dh);
    if (cache != nullptr) {
      probs_per_head.push_back(std::move(probs));
      if (drop.size() != 0) masks_per_head.push_back(std::move(drop));
    }
  }
  Matrix<T> out = context * layer.w_output;
  if (cache != nullptr) {
    cache->input = h;
    cache->query = std::move(query);
    cache->key = std::move(key);
    cache->value = std::move(value);
    cache->probs = std::move(probs_per_head);
    cache->prob_masks = std::move(masks_per_head);
    cache->context = std::move(context);
  }
  return out;
}

template <typename T>
Matrix<T> attention_layer(const Matrix<T>& h_in,
                          const AttentionLayerParams<T>& layer,
                          const CausalMask& mask, const FopConfig& cfg,
                          Mode mode, Rng& rng, LayerCache<T>* cache) {
  const T eps = static_cast<T>(kLayerNormEps);
  AttentionCache<T>* attn_cache = cache ? &cache->attn : nullptr;
  const Matrix<T> attn = masked_multi_head_attention(h_in, layer, mask, cfg, mode, rng, attn_cache);
  Matrix<T> r1 = h_in + draw_and_apply(attn, cfg, mode, rng, cache ? &cache->attn_drop : nullptr);
  Matrix<T> mid = layer_norm_rows(r1, layer.ln1_gamma, layer.ln1_beta, eps,
                                  cache ? &cache->ln1 : nullptr);
  Matrix<T> ff_pre = mid * layer.w_ff1;
  ff_pre.rowwise() += layer.b_ff1.row(0);
  Matrix<T> ff_act = ff_pre.cwiseMax(T(0));
  Matrix<T> ff_out = ff_act * layer.w_ff2;
  ff_out.rowwise() += layer.b_ff2.row(0);
  const Matrix<T> r2 =
      mid + draw_and_apply(ff_out, cfg, mode, rng, cache ? &cache->ff_drop : nullptr);
  Matrix<T> out = layer_norm_rows(r2, layer.ln2_gamma, layer.ln2_beta, eps,
                                  cache ? &cache->ln2 : nullptr);
  if (cache != nullptr) {
    cache->mid = std::move(mid);
    cache->ff_pre = std::move(ff_pre);
    cache->ff_act = std::move(ff_act);
  }
  return out;
}

template <typename T>
FopOutput<T> fop_forward(const Matrix<T>& features, const FopParams<T>& params,
                         const FopConfig& cfg, Mode mode, Rng& rng,
                         ForwardCache<T>* cache) {
  cfg.validate();
  if (params.layers.size() != static_cast<size_t>(cfg.n_layers)) {
    throw std::invalid_argument("fop_forward: parameter/config layer count mismatch");
  }
  FopOutput<T> out;
  out.acts.mode = mode;
  out.acts.hidden.reserve(static_cast<size_t>(cfg.n_layers) + 1);
  out.acts.hidden.push_back(
      embed_inputs(features, params, cfg, mode, rng, cache ? &cache->embed_drop : nullptr));
  if (cache != nullptr) cache->layers.assign(static_cast<size_t>(cfg.n_layers), {});
  const CausalMask mask(features.rows());
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.acts.hidden.push_back(attention_layer(
        out.acts.hidden.back(), params.layers[static_cast<size_t>(l)], mask, cfg, mode, rng,
        cache ? &cache->layers[static_cast<size_t>(l)] : nullptr));
  }
  out.predictions = out.acts.last() * params.w_out;
  out.predictions.rowwise() += params.b_out.row(0);
  return out;
}

template <typename T>
T fop_loss(const Matrix<T>& features, const FopParams<T>& params,
           const FopConfig& cfg, Mode mode, Rng& rng) {
  if (features.rows() < 2) throw std::invalid_argument("fop_loss: need T >= 2 frames");
  const FopOutput<T> out = fop_forward(features, params, cfg, mode, rng);
  const Eigen::Index n = features.rows() - 1;
  const T sum = (out.predictions.topRows(n) - features.bottomRows(n)).squaredNorm();
  return sum / static_cast<T>(n * features.cols());
}

template <typename T>
void backward_from_last_hidden(const Matrix<T>& features,
                               const FopParams<T>& params,
                               const FopConfig& cfg,
                               const ForwardCache<T>& cache,
                               const Matrix<T>& d_last, FopParams<T>& grads) {
  Matrix<T> d_h = d_last;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto idx = static_cast<size_t>(l);
    d_h = attention_layer_backward(d_h, params.layers[idx], cache.layers[idx], cfg,
                                   grads.layers[idx]);
  }
  grads.w_embed.noalias() += features.transpose() * apply_mask(d_h, cache.embed_drop);
}

template <typename T>
T fop_loss_and_grad(const Matrix<T>& features, const FopParams<T>& params,
                    const FopConfig& cfg, Mode mode, Rng& rng,
                    FopParams<T>& grads) {
  if (features.rows() < 2) throw std::invalid_argument("fop_loss: need T >= 2 frames");
  ForwardCache<T> cache;
  const FopOutput<T> out = fop_forward(features, params, cfg, mode, rng, &cache);
  const Eigen::Index n = features.rows() - 1;
  const T denom = static_cast<T>(n * features.cols());
  Matrix<T> d_pred = Matrix<T>::Zero(features.rows(), features.cols());
  d_pred.topRows(n) = out.predictions.topRows(n) - features.bottomRows(n);
  const T loss = d_pred.squaredNorm() / denom;
  d_pred *= T(2) / denom;
  grads.w_out.noalias() += out.acts.last().transpose() * d_pred;
  grads.b_out += d_pred.colwise().sum();
  const Matrix<T> d_last = d_pred * params.w_out.transpose();
  backward_from_last_hidden(features, params, cfg, cache, d_last, grads);
  return loss;
}

#define FOPSER_INSTANTIATE(T)                                                       \
  template struct FopParams<T>;                                                     \
  template void check_shapes<T>(const FopParams<T>&, const FopConfig&);             \
  template FopParams<T> init_params<T>(const FopConfig&, Rng&);                     \
  template Matrix<T> positional_encoding<T>(Eigen::Index, int);                     \
  template Matrix<T> embed_inputs<T>(const Matrix<T>&, const FopParams<T>&,         \
                                     const FopConfig&, Mode, Rng&, Matrix<T>*);     \
  template Matrix<T> masked_multi_head_attention<T>(                                \
      const Matrix<T>&, const AttentionLayerParams<T>&, const CausalMask&,          \
      const FopConfig&, Mode, Rng&, AttentionCache<T>*);                            \
  template Matrix<T> attention_layer<T>(const Matrix<T>&,                           \
                                        const AttentionLayerParams<T>&,             \
                                        const CausalMask&, const FopConfig&, Mode,  \
                                        Rng&, LayerCache<T>*);                      \
  template FopOutput<T> fop_forward<T>(const Matrix<T>&, const FopParams<T>&,       \
                                       const FopConfig&, Mode, Rng&,                \
                                       ForwardCache<T>*);                           \
  template T fop_loss<T>(const Matrix<T>&, const FopParams<T>&, const FopConfig&,   \
                         Mode, Rng&);                                               \
  template T fop_loss_and_grad<T>(const Matrix<T>&, const FopParams<T>&,            \
                                  const FopConfig&, Mode, Rng&, FopParams<T>&);     \
  template void backward_from_last_hidden<T>(                                       \
      const Matrix<T>&, const FopParams<T>&, const FopConfig&,                      \
      const ForwardCache<T>&, const Matrix<T>&, FopParams<T>&);

FOPSER_INSTANTIATE(float)
FOPSER_INSTANTIATE(double)
#undef FOPSER_INSTANTIATE

}  // namespace fopser
