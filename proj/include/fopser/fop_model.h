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

// Causal self-attention next-frame predictor over log-mel frames.
//
// Data flow for one sequence F (T x d_feat), all matrices time-major:
//   h_0 = Dropout(F W_e + PE)
//   h_l = AttentionLayer(h_{l-1}),  l = 1..L   (post-norm)
//   predictions = h_L W_out + b_out           (row t predicts frame t+1)
//
// Every function is templated on the scalar: float for training, double for
// gradient checks. Backward passes are written by hand against the caches
// filled by the forward functions.

#ifndef FOPSER_FOP_MODEL_H_
#define FOPSER_FOP_MODEL_H_

#include <string>
#include <vector>

#include "fopser/numerics.h"

namespace fopser {

struct FopConfig {
  int d_feat = 80;
  int d_model = 256;
  int n_heads = 4;
  int d_ff = 513;
  int n_layers = 2;
  double dropout_p = 0.2;
  int max_len = 2000;
  // Test hook: when false the sinusoidal table is not added.
  bool positional_encoding = true;

  int d_head() const { return d_model / n_heads; }
  // Throws std::invalid_argument on non-positive dims or d_model % n_heads.
  void validate() const;

  // d_model equal to the 80-dim input so that the additive hypercolumn is
  // defined.
  static FopConfig hypercolumn_add_compat();

  bool operator==(const FopConfig&) const = default;
};

template <typename T>
struct ParamRef {
  std::string name;
  Matrix<T>* tensor;
  bool is_vector;  // persisted with rank 1
};

template <typename T>
struct ConstParamRef {
  std::string name;
  const Matrix<T>* tensor;
  bool is_vector;
};

template <typename T>
struct AttentionLayerParams {
  Matrix<T> w_query, w_key, w_value, w_output;  // d_model x d_model
  Matrix<T> w_ff1, b_ff1;                       // d_model x d_ff, 1 x d_ff
  Matrix<T> w_ff2, b_ff2;                       // d_ff x d_model, 1 x d_model
  Matrix<T> ln1_gamma, ln1_beta;                 // after attention
  Matrix<T> ln2_gamma, ln2_beta;                 // after feed-forward
};

template <typename T>
struct FopParams {
  Matrix<T> w_embed;  // d_feat x d_model
  std::vector<AttentionLayerParams<T>> layers;
  Matrix<T> w_out;    // d_model x d_feat
  Matrix<T> b_out;    // 1 x d_feat

  // All-zero tensors of the shapes `cfg` implies (gradient accumulators).
  static FopParams zeros(const FopConfig& cfg);

  std::vector<ParamRef<T>> refs();
  std::vector<ConstParamRef<T>> refs() const;

  template <typename U>
  FopParams<U> cast() const {
    FopParams<U> out;
    out.w_embed = w_embed.template cast<U>();
    out.w_out = w_out.template cast<U>();
    out.b_out = b_out.template cast<U>();
    for (const auto& l : layers) {
      AttentionLayerParams<U> c;
      c.w_query = l.w_query.template cast<U>();
      c.w_key = l.w_key.template cast<U>();
      c.w_value = l.w_value.template cast<U>();
      c.w_output = l.w_output.template cast<U>();
      c.w_ff1 = l.w_ff1.template cast<U>();
      c.b_ff1 = l.b_ff1.template cast<U>();
      c.w_ff2 = l.w_ff2.template cast<U>();
      c.b_ff2 = l.b_ff2.template cast<U>();
      c.ln1_gamma = l.ln1_gamma.template cast<U>();
      c.ln1_beta = l.ln1_beta.template cast<U>();
      c.ln2_gamma = l.ln2_gamma.template cast<U>();
      c.ln2_beta = l.ln2_beta.template cast<U>();
      out.layers.push_back(std::move(c));
    }
    return out;
  }
};

// Throws std::invalid_argument if any tensor shape disagrees with `cfg`.
template <typename T>
void check_shapes(const FopParams<T>& params, const FopConfig& cfg);

// Weights ~ N(0, 0.02^2), biases 0, layer-norm gain 1 / shift 0.
template <typename T>
FopParams<T> init_params(const FopConfig& cfg, Rng& rng);

// Lower-triangular (diagonal included) attention pattern.
class CausalMask {
 public:
  explicit CausalMask(Eigen::Index size) : size_(size) {}
  Eigen::Index size() const { return size_; }
  bool allowed(Eigen::Index query, Eigen::Index key) const { return key <= query; }
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> dense() const;

 private:
  Eigen::Index size_;
};

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same angle).
template <typename T>
Matrix<T> positional_encoding(Eigen::Index length, int d_model);

template <typename T>
struct LayerActivations {
  std::vector<Matrix<T>> hidden;  // h_0 .. h_L
  Mode mode = Mode::kEval;

  int num_layers() const { return static_cast<int>(hidden.size()) - 1; }
  const Matrix<T>& last() const { return hidden.back(); }
};

template <typename T>
struct AttentionCache {
  Matrix<T> input, query, key, value;
  std::vector<Matrix<T>> probs;       // per head, T x T, before dropout
  std::vector<Matrix<T>> prob_masks;  // empty in eval mode
  Matrix<T> context;                  // concatenated head outputs
};

template <typename T>
struct LayerCache {
  AttentionCache<T> attn;
  Matrix<T> attn_drop;
  LayerNormCache<T> ln1;
  Matrix<T> mid;     // output of the first sublayer
  Matrix<T> ff_pre;  // before ReLU
  Matrix<T> ff_act;  // after ReLU
  Matrix<T> ff_drop;
  LayerNormCache<T> ln2;
};

template <typename T>
struct ForwardCache {
  Matrix<T> embed_drop;
  std::vector<LayerCache<T>> layers;
};

template <typename T>
Matrix<T> embed_inputs(const Matrix<T>& features, const FopParams<T>& params,
                       const FopConfig& cfg, Mode mode, Rng& rng,
                       Matrix<T>* drop_mask = nullptr);

template <typename T>
Matrix<T> masked_multi_head_attention(const Matrix<T>& h,
                                      const AttentionLayerParams<T>& layer,
                                      const CausalMask& mask,
                                      const FopConfig& cfg, Mode mode, Rng& rng,
                                      AttentionCache<T>* cache = nullptr);

template <typename T>
Matrix<T> attention_layer(const Matrix<T>& h_in,
                          const AttentionLayerParams<T>& layer,
                          const CausalMask& mask, const FopConfig& cfg,
                          Mode mode, Rng& rng, LayerCache<T>* cache = nullptr);

template <typename T>
struct FopOutput {
  Matrix<T> predictions;  // T x d_feat
  LayerActivations<T> acts;
};

template <typename T>
FopOutput<T> fop_forward(const Matrix<T>& features, const FopParams<T>& params,
                         const FopConfig& cfg, Mode mode, Rng& rng,
                         ForwardCache<T>* cache = nullptr);

// Mean squared error of predictions[0..T-2] against frames[1..T-1].
template <typename T>
T fop_loss(const Matrix<T>& features, const FopParams<T>& params,
           const FopConfig& cfg, Mode mode, Rng& rng);

// As fop_loss, additionally accumulating d loss / d params into `grads`.
template <typename T>
T fop_loss_and_grad(const Matrix<T>& features, const FopParams<T>& params,
                    const FopConfig& cfg, Mode mode, Rng& rng,
                    FopParams<T>& grads);

// Backpropagates d loss / d h_L through every attention layer and the input
// embedding, accumulating into `grads` (the prediction head is untouched).
template <typename T>
void backward_from_last_hidden(const Matrix<T>& features,
                               const FopParams<T>& params,
                               const FopConfig& cfg,
                               const ForwardCache<T>& cache,
                               const Matrix<T>& d_last, FopParams<T>& grads);

}  // namespace fopser

#endif  // FOPSER_FOP_MODEL_H_
