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

// Training loops, early stopping, metrics and the repeat / cross-validation
// protocol that tie the corpus, features, model and transfer modules
// together.

#ifndef FOPSER_HARNESS_H_
#define FOPSER_HARNESS_H_

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fopser/checkpoint.h"
#include "fopser/corpus.h"
#include "fopser/features.h"
#include "fopser/fop_model.h"
#include "fopser/transfer.h"

namespace fopser {

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 32;
  int max_epochs = 100;
  int patience = 5;
  double val_fraction = 0.1;
  uint64_t seed = 0;
  double dropout_p = 0.2;
  int repeats = 1;
  bool freeze_body = false;
  // When false, training always runs max_epochs (the best epoch is still
  // the one returned).
  bool early_stopping = true;

  void validate() const;
};

// One utterance worth of frames plus the metadata the protocol needs.
struct LabeledSequence {
  std::string id;
  std::string speaker_id;
  std::string session_id;
  std::optional<Emotion> label;
  Matrix<float> frames;  // T x d_feat
};

using Dataset = std::vector<LabeledSequence>;

// Raw (un-normalized) log-mel frames for every utterance in manifest order.
Dataset featurize(const CorpusManifest& manifest, const FrameConfig& cfg);

NormStats fit_norm(const Dataset& data);
Dataset normalize(const Dataset& data, const NormStats& stats);

// Per speaker, round(val_fraction * n) utterances (leaving at least one for
// training) go to validation. Returns (train, val).
std::pair<Dataset, Dataset> split_validation(const Dataset& data,
                                             double val_fraction, Rng& rng);

// Splits sequences longer than max_len into consecutive pieces.
std::vector<Matrix<float>> chunk_frames(const Matrix<float>& frames, int max_len);

// Batches of indices: sequences are ordered by length (random tie-break),
// cut into runs of batch_size, and the batch order is shuffled.
std::vector<std::vector<size_t>> make_batches(std::span<const Eigen::Index> lengths,
                                              int batch_size, Rng& rng);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean train-mode loss over the epoch's batches
  double monitor = 0.0;     // validation loss (pretrain) or WA (finetune)
};

struct TrainHistory {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  // 0 = the initial parameters
};

// Eval-mode mean per-sequence next-frame loss.
double mean_fop_loss(const Dataset& normalized, const FopParams<float>& params,
                     const FopConfig& cfg);

// Unsupervised pre-training on raw features (labels ignored). Normalization
// is fitted on the training side of the validation split.
Checkpoint pretrain(const Dataset& raw, const FopConfig& model_cfg,
                    const TrainConfig& train_cfg, const FrameConfig& frames,
                    TrainHistory* history = nullptr);
Checkpoint pretrain(const CorpusManifest& corpus, const FopConfig& model_cfg,
                    const TrainConfig& train_cfg, const FrameConfig& frames = {},
                    TrainHistory* history = nullptr);

// Fine-tuning with a freshly initialized head. `init` null means training
// from scratch with `fresh_cfg`; otherwise the body, normalization and frame
// setup come from `init`. Early stopping monitors validation WA (ties broken
// by lower validation cross-entropy).
Checkpoint finetune(const Checkpoint* init, const FopConfig& fresh_cfg,
                    const Dataset& raw_labeled, const TrainConfig& train_cfg,
                    const FrameConfig& frames, TrainHistory* history = nullptr);
Checkpoint finetune(const Checkpoint* init, const FopConfig& fresh_cfg,
                    const CorpusManifest& labeled, const TrainConfig& train_cfg,
                    const FrameConfig& frames = {}, TrainHistory* history = nullptr);

// Class probabilities of a fine-tuned checkpoint for raw frames. Long inputs
// are chunked and the chunk probabilities averaged, weighted by length.
RowVector<float> predict_probs(const Checkpoint& ckpt, const Matrix<float>& raw_frames);
std::vector<Emotion> predict_labels(const Checkpoint& ckpt, const Dataset& raw);

// Normalized (by the model's stats) frames, per-chunk feature extraction,
// and time-mean pooling. With `model` null only kind F is available and
// frames are used as given.
HypercolumnFeature extract_utterance(const Checkpoint* model, const Matrix<float>& raw_frames,
                                     FeatureKind kind);
Matrix<double> pooled_features(const Checkpoint* model, const Dataset& raw, FeatureKind kind);

std::vector<Emotion> labels_of(const Dataset& data);

using ConfusionMatrix = std::array<std::array<int, kNumEmotions>, kNumEmotions>;

struct Metrics {
  double wa = 0.0;  // overall accuracy
  double ua = 0.0;  // mean per-class recall over classes present in truth
  ConfusionMatrix confusion{};  // rows = truth, cols = prediction
};

Metrics weighted_accuracy(std::span<const Emotion> preds, std::span<const Emotion> truth);

struct EvalResult {
  std::vector<double> wa_per_repeat;
  std::vector<double> ua_per_repeat;
  double wa_mean = 0.0, wa_std = 0.0;
  double ua_mean = 0.0, ua_std = 0.0;
  ConfusionMatrix confusion{};  // from the final repeat, pooled over folds
  int folds = 0;
};

// Trains on `train` with the given seed and returns a label per `test` item.
using Pipeline =
    std::function<std::vector<Emotion>(const Dataset& train, const Dataset& test, uint64_t seed)>;

// Throws if any fold's train and test share a speaker.
void check_speaker_disjoint(const Dataset& train, const Dataset& test);

// Repeat r uses seed base_seed + r. Within a repeat, predictions of every
// fold are pooled before computing WA / UA. Population std over repeats.
EvalResult evaluate(std::span<const std::pair<Dataset, Dataset>> folds, const Pipeline& pipeline,
                    int repeats, uint64_t base_seed);

// Dataset views of manifest splits (items matched by utterance id).
std::pair<Dataset, Dataset> select_split(const Dataset& all, const Split& split);

Pipeline make_finetune_pipeline(const Checkpoint* init, const FopConfig& fresh_cfg,
                                const TrainConfig& train_cfg, const FrameConfig& frames);
Pipeline make_hypercolumn_pipeline(const Checkpoint* model, FeatureKind kind,
                                   ClassifierKind clf_kind, const ClassifierConfig& clf_cfg);

// Finite-difference check of the next-frame loss and the fine-tuning
// cross-entropy on the tiny config (d_feat 6, d_model 8, 2 heads, d_ff 11,
// 2 layers, T = 5) in double precision. Parameters are the usual init plus
// N(0, param_jitter^2) noise: at the 0.02 init scale the attention scores are
// nearly constant and the query/key gradients sit at the rounding floor of
// the difference quotient.
struct GradSuiteResult {
  GradReport fop;
  GradReport finetune;
  bool passed() const { return fop.passed && finetune.passed; }
};
GradSuiteResult run_gradient_suite(uint64_t seed, const GradCheckOptions& options = {},
                                   double param_jitter = 0.3);

// One key=value per line (machine readable) and an aligned text table.
std::string format_summary(const EvalResult& r);
std::string format_table(const EvalResult& r);

}  // namespace fopser

#endif  // FOPSER_HARNESS_H_
