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

// Transfer from a trained next-frame predictor to emotion classification:
// whole-model fine-tuning through a pooled projection head, and fixed
// layer-wise ("hypercolumn") features for linear classifiers.

#ifndef FOPSER_TRANSFER_H_
#define FOPSER_TRANSFER_H_

#include <array>
#include <span>
#include <string>
#include <string_view>

#include "fopser/corpus.h"
#include "fopser/fop_model.h"

namespace fopser {

template <typename T>
struct FinetuneHead {
  Matrix<T> w_y;   // d_model x 4
  Matrix<T> bias;  // 1 x 4

  static FinetuneHead zeros(int d_model);
  std::vector<ParamRef<T>> refs();

  template <typename U>
  FinetuneHead<U> cast() const {
    return {w_y.template cast<U>(), bias.template cast<U>()};
  }
};

template <typename T>
FinetuneHead<T> init_head(int d_model, Rng& rng);

// Mean over rows.
template <typename T>
RowVector<T> global_average_pool(const Matrix<T>& h);

// softmax(GAP(h_L) W_y + bias), in the fixed emotion order.
template <typename T>
RowVector<T> finetune_probs(const Matrix<T>& features, const FopParams<T>& params,
                            const FinetuneHead<T>& head, const FopConfig& cfg,
                            Mode mode, Rng& rng);

// Cross-entropy -log P(label | F).
template <typename T>
T finetune_loss(const Matrix<T>& features, Emotion label,
                const FopParams<T>& params, const FinetuneHead<T>& head,
                const FopConfig& cfg, Mode mode, Rng& rng);

// Cross-entropy plus gradients. `body_grads` may be null, in which case the
// backward pass stops at the head (frozen body). `probs` receives the
// forward probabilities when non-null.
template <typename T>
T finetune_loss_and_grad(const Matrix<T>& features, Emotion label,
                         const FopParams<T>& params, const FinetuneHead<T>& head,
                         const FopConfig& cfg, Mode mode, Rng& rng,
                         FopParams<T>* body_grads, FinetuneHead<T>& head_grads,
                         RowVector<T>* probs = nullptr);

struct FeatureKind {
  enum class Type { kInput, kLayer, kAdd, kConcat };
  Type type = Type::kInput;
  int layer = 0;  // 1-based, only for kLayer

  // Accepts F, h<l> (l >= 1), add, concat.
  static FeatureKind parse(std::string_view name);
  std::string name() const;
  bool operator==(const FeatureKind&) const = default;
};

struct HypercolumnFeature {
  FeatureKind kind;
  Matrix<float> frames;    // T x d_kind
  RowVector<float> pooled;  // time mean
};

// F + sum of h_1..h_L. Requires the frame width to equal d_model.
HypercolumnFeature hypercolumn_add(const Matrix<float>& features,
                                   const LayerActivations<float>& acts);

// Concat(F, h_1, ..., h_L) per frame: width d_feat + L * d_model.
HypercolumnFeature hypercolumn_concat(const Matrix<float>& features,
                                      const LayerActivations<float>& acts);

// Eval-mode forward pass, then the requested representation.
HypercolumnFeature extract_feature(const Matrix<float>& features,
                                   const FopParams<float>& params,
                                   const FopConfig& cfg, FeatureKind kind);

enum class ClassifierKind { kSoftmax, kLinearSvm };

ClassifierKind parse_classifier_kind(std::string_view name);
std::string_view classifier_kind_name(ClassifierKind kind);

struct ClassifierConfig {
  double lr = 0.5;          // initial step; softmax halves it on a loss increase
  int max_epochs = 1000;
  double l2 = 1e-3;
  double tol = 1e-6;        // softmax stopping rule on |loss change|
  int batch_size = 16;      // svm SGD mini-batch
};

struct LinearClassifier {
  ClassifierKind kind = ClassifierKind::kSoftmax;
  Matrix<double> weights;  // d x 4
  RowVector<double> bias;  // 4
  // z-normalization fitted on the training inputs, applied in classify.
  RowVector<double> input_mean;
  RowVector<double> input_std;
  ClassifierConfig config;
  int epochs_run = 0;

  Eigen::Index dim() const { return weights.rows(); }
};

// Rows of `inputs` are pooled feature vectors. Throws if the label count
// differs from the row count, fewer than 4 samples, or any class is absent.
LinearClassifier train_classifier(const Matrix<double>& inputs,
                                  std::span<const Emotion> labels,
                                  ClassifierKind kind,
                                  const ClassifierConfig& config, Rng& rng);

struct Prediction {
  Emotion label;
  std::array<double, kNumEmotions> scores;
};

// Index of the maximum; the lowest index wins ties.
int argmax_first(std::span<const double> scores);

// Softmax kind scores are probabilities; svm kind scores are margins.
Prediction classify(const LinearClassifier& clf, const RowVector<double>& x);

}  // namespace fopser

#endif  // FOPSER_TRANSFER_H_
