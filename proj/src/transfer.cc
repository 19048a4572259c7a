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

#include "fopser/transfer.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fopser {

namespace {

constexpr double kNormFloor = 1e-8;

template <typename T>
RowVector<T> head_logits(const RowVector<T>& pooled, const FinetuneHead<T>& head) {
  RowVector<T> logits = pooled * head.w_y;
  logits += head.bias.row(0);
  return logits;
}

Matrix<double> one_hot(std::span<const Emotion> labels) {
  Matrix<double> y = Matrix<double>::Zero(static_cast<Eigen::Index>(labels.size()), kNumEmotions);
  for (size_t i = 0; i < labels.size(); ++i) {
    y(static_cast<Eigen::Index>(i), emotion_index(labels[i])) = 1.0;
  }
  return y;
}

Matrix<double> row_softmax(const Matrix<double>& logits) {
  Matrix<double> p = logits;
  softmax_rows(p, /*causal=*/false);
  return p;
}

double softmax_objective(const Matrix<double>& x, const Matrix<double>& y,
                         const Matrix<double>& w, const RowVector<double>& b,
                         double l2, Matrix<double>* probs) {
  Matrix<double> logits = x * w;
  logits.rowwise() += b;
  Matrix<double> p = row_softmax(logits);
  double ce = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index c;
    y.row(i).maxCoeff(&c);
    ce -= std::log(std::max(p(i, c), 1e-300));
  }
  if (probs != nullptr) *probs = std::move(p);
  return ce / static_cast<double>(x.rows()) + 0.5 * l2 * w.squaredNorm();
}

void fit_softmax(const Matrix<double>& x, const Matrix<double>& y,
                 LinearClassifier& clf) {
  const ClassifierConfig& cfg = clf.config;
  const double n = static_cast<double>(x.rows());
  Matrix<double> probs;
  double loss = softmax_objective(x, y, clf.weights, clf.bias, cfg.l2, &probs);
  double lr = cfg.lr;
  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    const Matrix<double> residual = probs - y;
    const Matrix<double> grad_w = x.transpose() * residual / n + cfg.l2 * clf.weights;
    const RowVector<double> grad_b = residual.colwise().sum() / n;
    const Matrix<double> w_next = clf.weights - lr * grad_w;
    const RowVector<double> b_next = clf.bias - lr * grad_b;
    Matrix<double> probs_next;
    const double loss_next = softmax_objective(x, y, w_next, b_next, cfg.l2, &probs_next);
    if (loss_next > loss) {
      lr *= 0.5;
      if (lr < 1e-12) break;
      continue;
    }
    clf.weights = w_next;
    clf.bias = b_next;
    probs = std::move(probs_next);
    const double change = loss - loss_next;
    loss = loss_next;
    if (change < cfg.tol) {
      ++epoch;
      break;
    }
  }
  clf.epochs_run = epoch;
}

void fit_svm(const Matrix<double>& x, std::span<const Emotion> labels,
             LinearClassifier& clf, Rng& rng) {
  const ClassifierConfig& cfg = clf.config;
  const Eigen::Index n = x.rows();
  // +1 for the class, -1 otherwise.
  Matrix<double> target = -Matrix<double>::Ones(n, kNumEmotions);
  for (Eigen::Index i = 0; i < n; ++i) target(i, emotion_index(labels[static_cast<size_t>(i)])) = 1.0;

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto batch = static_cast<size_t>(std::max(1, cfg.batch_size));
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t end = std::min(order.size(), start + batch);
      const double lr = cfg.lr / (1.0 + cfg.lr * cfg.l2 * static_cast<double>(step++));
      Matrix<double> grad_w = cfg.l2 * clf.weights;
      RowVector<double> grad_b = RowVector<double>::Zero(kNumEmotions);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (size_t j = start; j < end; ++j) {
        const Eigen::Index i = order[j];
        const RowVector<double> scores = x.row(i) * clf.weights + clf.bias;
        for (int c = 0; c < kNumEmotions; ++c) {
          const double yc = target(i, c);
          if (yc * scores(c) < 1.0) {
            grad_w.col(c) -= (yc * inv_b) * x.row(i).transpose();
            grad_b(c) -= yc * inv_b;
          }
        }
      }
      clf.weights -= lr * grad_w;
      clf.bias -= lr * grad_b;
    }
    clf.epochs_run = epoch + 1;
  }
}

}  // namespace

template <typename T>
FinetuneHead<T> FinetuneHead<T>::zeros(int d_model) {
  return {Matrix<T>::Zero(d_model, kNumEmotions), Matrix<T>::Zero(1, kNumEmotions)};
}

template <typename T>
std::vector<ParamRef<T>> FinetuneHead<T>::refs() {
  return {{"head.W_y", &w_y, false}, {"head.b", &bias, true}};
}

template <typename T>
FinetuneHead<T> init_head(int d_model, Rng& rng) {
  FinetuneHead<T> head = FinetuneHead<T>::zeros(d_model);
  std::normal_distribution<double> dist(0.0, 0.02);
  for (Eigen::Index i = 0; i < head.w_y.size(); ++i) {
    head.w_y.data()[i] = static_cast<T>(dist(rng));
  }
  return head;
}

template <typename T>
RowVector<T> global_average_pool(const Matrix<T>& h) {
  if (h.rows() == 0) throw std::invalid_argument("global_average_pool: empty sequence");
  return h.colwise().mean();
}

template <typename T>
RowVector<T> finetune_probs(const Matrix<T>& features, const FopParams<T>& params,
                            const FinetuneHead<T>& head, const FopConfig& cfg,
                            Mode mode, Rng& rng) {
  if (head.w_y.rows() != cfg.d_model || head.w_y.cols() != kNumEmotions ||
      head.bias.size() != kNumEmotions) {
    throw std::invalid_argument("finetune: head shape does not match d_model");
  }
  const FopOutput<T> out = fop_forward(features, params, cfg, mode, rng);
  return softmax<T>(head_logits<T>(global_average_pool(out.acts.last()), head));
}

template <typename T>
T finetune_loss(const Matrix<T>& features, Emotion label,
                const FopParams<T>& params, const FinetuneHead<T>& head,
                const FopConfig& cfg, Mode mode, Rng& rng) {
  const RowVector<T> p = finetune_probs(features, params, head, cfg, mode, rng);
  return -std::log(p(emotion_index(label)));
}

template <typename T>
T finetune_loss_and_grad(const Matrix<T>& features, Emotion label,
                         const FopParams<T>& params, const FinetuneHead<T>& head,
                         const FopConfig& cfg, Mode mode, Rng& rng,
                         FopParams<T>* body_grads, FinetuneHead<T>& head_grads,
                         RowVector<T>* probs) {
  if (head.w_y.rows() != cfg.d_model || head.w_y.cols() != kNumEmotions) {
    throw std::invalid_argument("finetune: head shape does not match d_model");
  }
  ForwardCache<T> cache;
  const FopOutput<T> out =
      fop_forward(features, params, cfg, mode, rng, body_grads ? &cache : nullptr);
  const RowVector<T> pooled = global_average_pool(out.acts.last());
  const RowVector<T> p = softmax<T>(head_logits<T>(pooled, head));
  const int y = emotion_index(label);
  const T loss = -std::log(p(y));
  RowVector<T> d_logits = p;
  d_logits(y) -= T(1);
  head_grads.w_y.noalias() += pooled.transpose() * d_logits;
  head_grads.bias += d_logits;
  if (body_grads != nullptr) {
    const RowVector<T> d_pooled = d_logits * head.w_y.transpose();
    const Eigen::Index len = features.rows();
    const Matrix<T> d_last =
        Matrix<T>::Ones(len, 1) * (d_pooled / static_cast<T>(len));
    backward_from_last_hidden(features, params, cfg, cache, d_last, *body_grads);
  }
  if (probs != nullptr) *probs = p;
  return loss;
}

FeatureKind FeatureKind::parse(std::string_view name) {
  if (name == "F") return {Type::kInput, 0};
  if (name == "add") return {Type::kAdd, 0};
  if (name == "concat") return {Type::kConcat, 0};
  if (name.size() >= 2 && name[0] == 'h') {
    int layer = 0;
    for (char c : name.substr(1)) {
      if (c < '0' || c > '9') {
        layer = -1;
        break;
      }
      layer = layer * 10 + (c - '0');
    }
    if (layer >= 1) return {Type::kLayer, layer};
  }
  throw std::invalid_argument("unknown feature kind '" + std::string(name) +
                              "' (expected F, h1, h2, ..., add or concat)");
}

std::string FeatureKind::name() const {
  switch (type) {
    case Type::kInput: return "F";
    case Type::kLayer: return "h" + std::to_string(layer);
    case Type::kAdd: return "add";
    case Type::kConcat: return "concat";
  }
  return "?";
}

HypercolumnFeature hypercolumn_add(const Matrix<float>& features,
                                   const LayerActivations<float>& acts) {
  HypercolumnFeature out;
  out.kind = {FeatureKind::Type::kAdd, 0};
  out.frames = features;
  for (int l = 1; l <= acts.num_layers(); ++l) {
    const Matrix<float>& h = acts.hidden[static_cast<size_t>(l)];
    if (h.cols() != features.cols()) {
      throw std::invalid_argument(
          "hypercolumn add needs d_model == d_feat, but h_" + std::to_string(l) + " has width " +
          std::to_string(h.cols()) + " and F has width " + std::to_string(features.cols()) +
          "; train the model with d_model = d_feat (hypercolumn-add-compat preset)");
    }
    if (h.rows() != features.rows()) {
      throw std::invalid_argument("hypercolumn add: frame count mismatch");
    }
    out.frames += h;
  }
  out.pooled = global_average_pool(out.frames);
  return out;
}

HypercolumnFeature hypercolumn_concat(const Matrix<float>& features,
                                      const LayerActivations<float>& acts) {
  Eigen::Index width = features.cols();
  for (int l = 1; l <= acts.num_layers(); ++l) {
    const Matrix<float>& h = acts.hidden[static_cast<size_t>(l)];
    if (h.rows() != features.rows()) {
      throw std::invalid_argument("hypercolumn concat: h_" + std::to_string(l) + " has " +
                                  std::to_string(h.rows()) + " frames, F has " +
                                  std::to_string(features.rows()));
    }
    width += h.cols();
  }
  HypercolumnFeature out;
  out.kind = {FeatureKind::Type::kConcat, 0};
  out.frames.resize(features.rows(), width);
  out.frames.leftCols(features.cols()) = features;
  Eigen::Index col = features.cols();
  for (int l = 1; l <= acts.num_layers(); ++l) {
    const Matrix<float>& h = acts.hidden[static_cast<size_t>(l)];
    out.frames.middleCols(col, h.cols()) = h;
    col += h.cols();
  }
  out.pooled = global_average_pool(out.frames);
  return out;
}

HypercolumnFeature extract_feature(const Matrix<float>& features,
                                   const FopParams<float>& params,
                                   const FopConfig& cfg, FeatureKind kind) {
  if (kind.type == FeatureKind::Type::kInput) {
    return {kind, features, global_average_pool(features)};
  }
  if (kind.type == FeatureKind::Type::kLayer &&
      (kind.layer < 1 || kind.layer > cfg.n_layers)) {
    throw std::invalid_argument("feature kind " + kind.name() + " is outside 1.." +
                                std::to_string(cfg.n_layers));
  }
  if (kind.type == FeatureKind::Type::kAdd && cfg.d_model != cfg.d_feat) {
    throw std::invalid_argument(
        "hypercolumn add needs d_model == d_feat (model has d_model " +
        std::to_string(cfg.d_model) + ", d_feat " + std::to_string(cfg.d_feat) +
        "); train with the hypercolumn-add-compat preset");
  }
  Rng unused(0);
  const FopOutput<float> out = fop_forward(features, params, cfg, Mode::kEval, unused);
  switch (kind.type) {
    case FeatureKind::Type::kLayer: {
      const Matrix<float>& h = out.acts.hidden[static_cast<size_t>(kind.layer)];
      return {kind, h, global_average_pool(h)};
    }
    case FeatureKind::Type::kAdd:
      return hypercolumn_add(features, out.acts);
    default:
      return hypercolumn_concat(features, out.acts);
  }
}

ClassifierKind parse_classifier_kind(std::string_view name) {
  if (name == "softmax") return ClassifierKind::kSoftmax;
  if (name == "svm") return ClassifierKind::kLinearSvm;
  throw std::invalid_argument("unknown classifier '" + std::string(name) +
                              "' (expected softmax or svm)");
}

std::string_view classifier_kind_name(ClassifierKind kind) {
  return kind == ClassifierKind::kSoftmax ? "softmax" : "svm";
}

LinearClassifier train_classifier(const Matrix<double>& inputs,
                                  std::span<const Emotion> labels,
                                  ClassifierKind kind,
                                  const ClassifierConfig& config, Rng& rng) {
  if (static_cast<size_t>(inputs.rows()) != labels.size()) {
    throw std::invalid_argument("train_classifier: " + std::to_string(inputs.rows()) +
                                " inputs but " + std::to_string(labels.size()) + " labels");
  }
  if (inputs.rows() < kNumEmotions || inputs.cols() < 1) {
    throw std::invalid_argument("train_classifier: need at least 4 non-empty samples");
  }
  std::array<int, kNumEmotions> counts{};
  for (Emotion e : labels) ++counts[static_cast<size_t>(emotion_index(e))];
  for (int c = 0; c < kNumEmotions; ++c) {
    if (counts[static_cast<size_t>(c)] == 0) {
      throw std::invalid_argument("train_classifier: class '" +
                                  std::string(emotion_name(static_cast<Emotion>(c))) +
                                  "' has no training samples");
    }
  }
  LinearClassifier clf;
  clf.kind = kind;
  clf.config = config;
  clf.input_mean = inputs.colwise().mean();
  clf.input_std =
      ((inputs.rowwise() - clf.input_mean).array().square().colwise().mean().sqrt())
          .max(kNormFloor)
          .matrix();
  const Matrix<double> x =
      ((inputs.rowwise() - clf.input_mean).array().rowwise() / clf.input_std.array()).matrix();
  clf.weights = Matrix<double>::Zero(inputs.cols(), kNumEmotions);
  clf.bias = RowVector<double>::Zero(kNumEmotions);
  if (kind == ClassifierKind::kSoftmax) {
    fit_softmax(x, one_hot(labels), clf);
  } else {
    fit_svm(x, labels, clf, rng);
  }
  return clf;
}

int argmax_first(std::span<const double> scores) {
  int best = 0;
  for (size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

Prediction classify(const LinearClassifier& clf, const RowVector<double>& x) {
  if (x.size() != clf.dim()) {
    throw std::invalid_argument("classify: input width " + std::to_string(x.size()) +
                                " does not match classifier width " +
                                std::to_string(clf.dim()));
  }
  const RowVector<double> z = ((x - clf.input_mean).array() / clf.input_std.array()).matrix();
  RowVector<double> scores = z * clf.weights + clf.bias;
  if (clf.kind == ClassifierKind::kSoftmax) scores = softmax<double>(scores);
  Prediction p{};
  for (int c = 0; c < kNumEmotions; ++c) p.scores[static_cast<size_t>(c)] = scores(c);
  p.label = static_cast<Emotion>(argmax_first(p.scores));
  return p;
}

#define FOPSER_INSTANTIATE(T)                                                        \
  template struct FinetuneHead<T>;                                                   \
  template FinetuneHead<T> init_head<T>(int, Rng&);                                  \
  template RowVector<T> global_average_pool<T>(const Matrix<T>&);                    \
  template RowVector<T> finetune_probs<T>(const Matrix<T>&, const FopParams<T>&,     \
                                          const FinetuneHead<T>&, const FopConfig&,  \
                                          Mode, Rng&);                               \
  template T finetune_loss<T>(const Matrix<T>&, Emotion, const FopParams<T>&,        \
                              const FinetuneHead<T>&, const FopConfig&, Mode, Rng&); \
  template T finetune_loss_and_grad<T>(const Matrix<T>&, Emotion,                    \
                                       const FopParams<T>&, const FinetuneHead<T>&,  \
                                       const FopConfig&, Mode, Rng&, FopParams<T>*,  \
                                       FinetuneHead<T>&, RowVector<T>*);

FOPSER_INSTANTIATE(float)
FOPSER_INSTANTIATE(double)
#undef FOPSER_INSTANTIATE

}  // namespace fopser
