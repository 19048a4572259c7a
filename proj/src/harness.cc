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

#include "fopser/harness.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace fopser {

namespace {

// Seed streams derived from TrainConfig::seed.
enum SeedStream : uint64_t { kSplitStream = 1, kInitStream = 2, kShuffleStream = 3 };

std::vector<Matrix<float>*> tensor_ptrs(FopParams<float>& p) {
  std::vector<Matrix<float>*> out;
  for (auto& r : p.refs()) out.push_back(r.tensor);
  return out;
}

std::vector<const Matrix<float>*> const_tensor_ptrs(FopParams<float>& p) {
  std::vector<const Matrix<float>*> out;
  for (auto& r : p.refs()) out.push_back(r.tensor);
  return out;
}

void zero_all(FopParams<float>& p) {
  for (auto& r : p.refs()) r.tensor->setZero();
}

void scale_all(FopParams<float>& p, float s) {
  for (auto& r : p.refs()) *r.tensor *= s;
}

// Training-side sequences after chunking, with their source labels.
struct TrainItem {
  Matrix<float> frames;
  std::optional<Emotion> label;
};

std::vector<TrainItem> chunk_dataset(const Dataset& data, int max_len, int min_frames) {
  std::vector<TrainItem> items;
  for (const LabeledSequence& s : data) {
    for (Matrix<float>& c : chunk_frames(s.frames, max_len)) {
      if (c.rows() >= min_frames) items.push_back({std::move(c), s.label});
    }
  }
  return items;
}

std::vector<Eigen::Index> lengths_of(const std::vector<TrainItem>& items) {
  std::vector<Eigen::Index> out;
  for (const TrainItem& it : items) out.push_back(it.frames.rows());
  return out;
}

double mean_loss_items(const std::vector<TrainItem>& items, const FopParams<float>& params,
                       const FopConfig& cfg) {
  if (items.empty()) return 0.0;
  Rng unused(0);
  double sum = 0.0;
  for (const TrainItem& it : items) {
    sum += static_cast<double>(fop_loss(it.frames, params, cfg, Mode::kEval, unused));
  }
  return sum / static_cast<double>(items.size());
}

struct ClassScore {
  double wa = 0.0;
  double ce = 0.0;
  // Higher WA wins; equal WA falls back to lower cross-entropy.
  bool better_than(const ClassScore& o) const {
    return wa > o.wa || (wa == o.wa && ce < o.ce);
  }
};

ClassScore score_classifier(const Dataset& normalized, const FopParams<float>& params,
                            const FinetuneHead<float>& head, const FopConfig& cfg) {
  Checkpoint view;
  view.config = cfg;
  view.params = params;
  view.head = head;
  std::vector<Emotion> preds, truth;
  double ce = 0.0;
  Rng unused(0);
  for (const LabeledSequence& s : normalized) {
    RowVector<float> p = RowVector<float>::Zero(kNumEmotions);
    Eigen::Index total = 0;
    for (const Matrix<float>& c : chunk_frames(s.frames, cfg.max_len)) {
      p += finetune_probs(c, params, head, cfg, Mode::kEval, unused) * static_cast<float>(c.rows());
      total += c.rows();
    }
    p /= static_cast<float>(total);
    std::array<double, kNumEmotions> scores{};
    for (int c = 0; c < kNumEmotions; ++c) scores[static_cast<size_t>(c)] = p(c);
    preds.push_back(static_cast<Emotion>(argmax_first(scores)));
    truth.push_back(*s.label);
    ce -= std::log(std::max(static_cast<double>(p(emotion_index(*s.label))), 1e-30));
  }
  return {weighted_accuracy(preds, truth).wa, ce / static_cast<double>(normalized.size())};
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("train config: patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("train config: val_fraction must be in (0, 1)");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw std::invalid_argument("train config: dropout_p must be in [0, 1)");
  }
  if (repeats < 1) throw std::invalid_argument("train config: repeats must be >= 1");
}

Dataset featurize(const CorpusManifest& manifest, const FrameConfig& cfg) {
  Dataset out;
  out.reserve(manifest.utterances.size());
  for (const Utterance& u : manifest.utterances) {
    const Waveform w = read_wav(manifest.resolve(u));
    out.push_back({u.id, u.speaker_id, u.session_id, u.label, log_mel(w, cfg).frames});
  }
  return out;
}

NormStats fit_norm(const Dataset& data) {
  std::vector<FeatureSequence> seqs;
  seqs.reserve(data.size());
  for (const LabeledSequence& s : data) seqs.push_back({s.frames, {}});
  return fit_norm(std::span<const FeatureSequence>(seqs));
}

Dataset normalize(const Dataset& data, const NormStats& stats) {
  Dataset out = data;
  for (LabeledSequence& s : out) {
    if (s.frames.cols() != stats.mean.size()) {
      throw std::invalid_argument("normalize: frame width " + std::to_string(s.frames.cols()) +
                                  " does not match stats width " +
                                  std::to_string(stats.mean.size()));
    }
    s.frames = ((s.frames.rowwise() - stats.mean).array().rowwise() / stats.std.array()).matrix();
  }
  return out;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& data, double val_fraction, Rng& rng) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<size_t>> by_speaker;
  for (size_t i = 0; i < data.size(); ++i) {
    auto [it, inserted] = by_speaker.try_emplace(data[i].speaker_id);
    if (inserted) order.push_back(data[i].speaker_id);
    it->second.push_back(i);
  }
  std::vector<bool> is_val(data.size(), false);
  for (const std::string& spk : order) {
    std::vector<size_t>& idx = by_speaker[spk];
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<long>(idx.size());
    const long n_val = std::min(n - 1, std::lround(val_fraction * static_cast<double>(n)));
    for (long j = 0; j < n_val; ++j) is_val[idx[static_cast<size_t>(j)]] = true;
  }
  Dataset train, val;
  for (size_t i = 0; i < data.size(); ++i) (is_val[i] ? val : train).push_back(data[i]);
  return {std::move(train), std::move(val)};
}

std::vector<Matrix<float>> chunk_frames(const Matrix<float>& frames, int max_len) {
  if (max_len < 1) throw std::invalid_argument("chunk_frames: max_len must be >= 1");
  std::vector<Matrix<float>> out;
  for (Eigen::Index start = 0; start < frames.rows(); start += max_len) {
    const Eigen::Index n = std::min<Eigen::Index>(max_len, frames.rows() - start);
    out.emplace_back(frames.middleRows(start, n));
  }
  return out;
}

std::vector<std::vector<size_t>> make_batches(std::span<const Eigen::Index> lengths,
                                              int batch_size, Rng& rng) {
  std::vector<size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::vector<uint64_t> tie(lengths.size());
  for (uint64_t& t : tie) t = rng();
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (lengths[a] != lengths[b]) return lengths[a] < lengths[b];
    if (tie[a] != tie[b]) return tie[a] < tie[b];
    return a < b;
  });
  std::vector<std::vector<size_t>> batches;
  const auto bs = static_cast<size_t>(batch_size);
  for (size_t start = 0; start < order.size(); start += bs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

double mean_fop_loss(const Dataset& normalized, const FopParams<float>& params,
                     const FopConfig& cfg) {
  return mean_loss_items(chunk_dataset(normalized, cfg.max_len, 2), params, cfg);
}

Checkpoint pretrain(const Dataset& raw, const FopConfig& model_cfg, const TrainConfig& train_cfg,
                    const FrameConfig& frames, TrainHistory* history) {
  train_cfg.validate();
  FopConfig cfg = model_cfg;
  cfg.dropout_p = train_cfg.dropout_p;
  cfg.validate();
  if (raw.empty()) throw std::invalid_argument("pretrain: empty corpus");

  Rng split_rng(derive_seed(train_cfg.seed, kSplitStream));
  auto [train_raw, val_raw] = split_validation(raw, train_cfg.val_fraction, split_rng);
  const NormStats norm = fit_norm(train_raw);
  const std::vector<TrainItem> train = chunk_dataset(normalize(train_raw, norm), cfg.max_len, 2);
  const std::vector<TrainItem> val = chunk_dataset(normalize(val_raw, norm), cfg.max_len, 2);
  if (train.empty()) throw std::invalid_argument("pretrain: no training sequence has >= 2 frames");
  // Without a validation set the training loss (eval mode) is monitored.
  const std::vector<TrainItem>& monitor_set = val.empty() ? train : val;

  Rng init_rng(derive_seed(train_cfg.seed, kInitStream));
  FopParams<float> params = init_params<float>(cfg, init_rng);
  FopParams<float> grads = FopParams<float>::zeros(cfg);
  AdamState<float> adam;
  adam.options.lr = train_cfg.lr;
  const auto param_ptrs = tensor_ptrs(params);
  const auto grad_ptrs = const_tensor_ptrs(grads);
  Rng rng(derive_seed(train_cfg.seed, kShuffleStream));
  const std::vector<Eigen::Index> lengths = lengths_of(train);

  TrainHistory log;
  const double initial_train = mean_loss_items(train, params, cfg);
  double best = mean_loss_items(monitor_set, params, cfg);
  double last_monitor = best;
  FopParams<float> best_params = params;
  int since_best = 0;
  int epoch = 0;
  while (epoch < train_cfg.max_epochs) {
    ++epoch;
    double epoch_loss = 0.0;
    for (const std::vector<size_t>& batch : make_batches(lengths, train_cfg.batch_size, rng)) {
      zero_all(grads);
      for (size_t i : batch) {
        Rng drop_rng(rng());
        epoch_loss += static_cast<double>(
            fop_loss_and_grad(train[i].frames, params, cfg, Mode::kTrain, drop_rng, grads));
      }
      scale_all(grads, 1.0f / static_cast<float>(batch.size()));
      adam_step<float>(param_ptrs, grad_ptrs, adam);
    }
    last_monitor = mean_loss_items(monitor_set, params, cfg);
    log.epochs.push_back({epoch, epoch_loss / static_cast<double>(train.size()), last_monitor});
    if (last_monitor < best) {
      best = last_monitor;
      best_params = params;
      log.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= train_cfg.patience && train_cfg.early_stopping) {
      break;
    }
  }

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.frames = frames;
  ckpt.params = std::move(best_params);
  ckpt.norm = norm;
  ckpt.provenance.stage = "pretrain";
  ckpt.provenance.seed = train_cfg.seed;
  ckpt.provenance.epochs_run = epoch;
  ckpt.provenance.initial_train_loss = initial_train;
  ckpt.provenance.final_train_loss = mean_loss_items(train, ckpt.params, cfg);
  ckpt.provenance.best_val_score = best;
  ckpt.provenance.final_val_score = last_monitor;
  if (history != nullptr) *history = std::move(log);
  return ckpt;
}

Checkpoint pretrain(const CorpusManifest& corpus, const FopConfig& model_cfg,
                    const TrainConfig& train_cfg, const FrameConfig& frames,
                    TrainHistory* history) {
  if (corpus.utterances.empty()) throw std::invalid_argument("pretrain: empty corpus");
  return pretrain(featurize(corpus, frames), model_cfg, train_cfg, frames, history);
}

Checkpoint finetune(const Checkpoint* init, const FopConfig& fresh_cfg, const Dataset& raw_labeled,
                    const TrainConfig& train_cfg, const FrameConfig& frames,
                    TrainHistory* history) {
  train_cfg.validate();
  if (raw_labeled.empty()) throw std::invalid_argument("finetune: empty corpus");
  for (const LabeledSequence& s : raw_labeled) {
    if (!s.label) throw std::invalid_argument("finetune: utterance '" + s.id + "' has no label");
  }
  Rng split_rng(derive_seed(train_cfg.seed, kSplitStream));
  auto [train_raw, val_raw] = split_validation(raw_labeled, train_cfg.val_fraction, split_rng);

  FopConfig cfg = init ? init->config : fresh_cfg;
  cfg.dropout_p = train_cfg.dropout_p;
  cfg.validate();
  Rng init_rng(derive_seed(train_cfg.seed, kInitStream));
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.frames = init ? init->frames : frames;
  if (init != nullptr) {
    check_shapes(init->params, init->config);
    ckpt.params = init->params;
    ckpt.norm = init->norm;
  } else {
    ckpt.params = init_params<float>(cfg, init_rng);
    ckpt.norm = fit_norm(train_raw);
  }
  FinetuneHead<float> head = init_head<float>(cfg.d_model, init_rng);

  const Dataset train_norm = normalize(train_raw, ckpt.norm);
  const Dataset val_norm = normalize(val_raw, ckpt.norm);
  const Dataset& monitor_set = val_norm.empty() ? train_norm : val_norm;
  const std::vector<TrainItem> train = chunk_dataset(train_norm, cfg.max_len, 1);
  const std::vector<Eigen::Index> lengths = lengths_of(train);

  FopParams<float> grads = FopParams<float>::zeros(cfg);
  FinetuneHead<float> head_grads = FinetuneHead<float>::zeros(cfg.d_model);
  std::vector<Matrix<float>*> param_ptrs;
  std::vector<const Matrix<float>*> grad_ptrs;
  if (!train_cfg.freeze_body) {
    param_ptrs = tensor_ptrs(ckpt.params);
    grad_ptrs = const_tensor_ptrs(grads);
  }
  for (auto& r : head.refs()) param_ptrs.push_back(r.tensor);
  for (auto& r : head_grads.refs()) grad_ptrs.push_back(r.tensor);
  AdamState<float> adam;
  adam.options.lr = train_cfg.lr;
  Rng rng(derive_seed(train_cfg.seed, kShuffleStream));

  TrainHistory log;
  ClassScore best = score_classifier(monitor_set, ckpt.params, head, cfg);
  ClassScore last = best;
  FopParams<float> best_params = ckpt.params;
  FinetuneHead<float> best_head = head;
  int since_best = 0;
  int epoch = 0;
  while (epoch < train_cfg.max_epochs) {
    ++epoch;
    double epoch_loss = 0.0;
    for (const std::vector<size_t>& batch : make_batches(lengths, train_cfg.batch_size, rng)) {
      zero_all(grads);
      head_grads.w_y.setZero();
      head_grads.bias.setZero();
      for (size_t i : batch) {
        Rng drop_rng(rng());
        epoch_loss += static_cast<double>(finetune_loss_and_grad(
            train[i].frames, *train[i].label, ckpt.params, head, cfg, Mode::kTrain, drop_rng,
            train_cfg.freeze_body ? nullptr : &grads, head_grads));
      }
      const float inv = 1.0f / static_cast<float>(batch.size());
      scale_all(grads, inv);
      head_grads.w_y *= inv;
      head_grads.bias *= inv;
      adam_step<float>(param_ptrs, grad_ptrs, adam);
    }
    last = score_classifier(monitor_set, ckpt.params, head, cfg);
    log.epochs.push_back({epoch, epoch_loss / static_cast<double>(train.size()), last.wa});
    if (last.better_than(best)) {
      best = last;
      best_params = ckpt.params;
      best_head = head;
      log.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= train_cfg.patience && train_cfg.early_stopping) {
      break;
    }
  }
  ckpt.params = std::move(best_params);
  ckpt.head = std::move(best_head);
  ckpt.provenance.stage = "finetune";
  ckpt.provenance.seed = train_cfg.seed;
  ckpt.provenance.epochs_run = epoch;
  ckpt.provenance.initial_train_loss = log.epochs.empty() ? 0.0 : log.epochs.front().train_loss;
  ckpt.provenance.final_train_loss = log.epochs.empty() ? 0.0 : log.epochs.back().train_loss;
  ckpt.provenance.best_val_score = best.wa;
  ckpt.provenance.final_val_score = last.wa;
  if (history != nullptr) *history = std::move(log);
  return ckpt;
}

Checkpoint finetune(const Checkpoint* init, const FopConfig& fresh_cfg,
                    const CorpusManifest& labeled, const TrainConfig& train_cfg,
                    const FrameConfig& frames, TrainHistory* history) {
  if (!labeled.labeled()) {
    throw std::invalid_argument("finetune: corpus is not fully labeled");
  }
  const FrameConfig& fc = init ? init->frames : frames;
  return finetune(init, fresh_cfg, featurize(labeled, fc), train_cfg, fc, history);
}

RowVector<float> predict_probs(const Checkpoint& ckpt, const Matrix<float>& raw_frames) {
  if (!ckpt.head) throw std::invalid_argument("predict: checkpoint has no classification head");
  LabeledSequence s;
  s.frames = raw_frames;
  const Dataset norm = normalize(Dataset{s}, ckpt.norm);
  Rng unused(0);
  RowVector<float> p = RowVector<float>::Zero(kNumEmotions);
  Eigen::Index total = 0;
  for (const Matrix<float>& c : chunk_frames(norm[0].frames, ckpt.config.max_len)) {
    p += finetune_probs(c, ckpt.params, *ckpt.head, ckpt.config, Mode::kEval, unused) *
         static_cast<float>(c.rows());
    total += c.rows();
  }
  return p / static_cast<float>(total);
}

std::vector<Emotion> predict_labels(const Checkpoint& ckpt, const Dataset& raw) {
  std::vector<Emotion> out;
  for (const LabeledSequence& s : raw) {
    const RowVector<float> p = predict_probs(ckpt, s.frames);
    std::array<double, kNumEmotions> scores{};
    for (int c = 0; c < kNumEmotions; ++c) scores[static_cast<size_t>(c)] = p(c);
    out.push_back(static_cast<Emotion>(argmax_first(scores)));
  }
  return out;
}

HypercolumnFeature extract_utterance(const Checkpoint* model, const Matrix<float>& raw_frames,
                                     FeatureKind kind) {
  if (model == nullptr) {
    if (kind.type != FeatureKind::Type::kInput) {
      throw std::invalid_argument("feature kind " + kind.name() + " needs a model checkpoint");
    }
    return {kind, raw_frames, global_average_pool(raw_frames)};
  }
  LabeledSequence s;
  s.frames = raw_frames;
  const Matrix<float> norm = normalize(Dataset{s}, model->norm)[0].frames;
  HypercolumnFeature out;
  out.kind = kind;
  std::vector<Matrix<float>> parts;
  Eigen::Index rows = 0;
  for (const Matrix<float>& c : chunk_frames(norm, model->config.max_len)) {
    parts.push_back(extract_feature(c, model->params, model->config, kind).frames);
    rows += parts.back().rows();
  }
  out.frames.resize(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const Matrix<float>& p : parts) {
    out.frames.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  out.pooled = global_average_pool(out.frames);
  return out;
}

Matrix<double> pooled_features(const Checkpoint* model, const Dataset& raw, FeatureKind kind) {
  Matrix<double> out;
  for (size_t i = 0; i < raw.size(); ++i) {
    const RowVector<float> pooled = extract_utterance(model, raw[i].frames, kind).pooled;
    if (i == 0) out.resize(static_cast<Eigen::Index>(raw.size()), pooled.size());
    out.row(static_cast<Eigen::Index>(i)) = pooled.cast<double>();
  }
  return out;
}

std::vector<Emotion> labels_of(const Dataset& data) {
  std::vector<Emotion> out;
  for (const LabeledSequence& s : data) {
    if (!s.label) throw std::invalid_argument("utterance '" + s.id + "' has no label");
    out.push_back(*s.label);
  }
  return out;
}

Metrics weighted_accuracy(std::span<const Emotion> preds, std::span<const Emotion> truth) {
  if (preds.size() != truth.size()) {
    throw std::invalid_argument("weighted_accuracy: " + std::to_string(preds.size()) +
                                " predictions for " + std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw std::invalid_argument("weighted_accuracy: empty input");
  Metrics m;
  for (size_t i = 0; i < truth.size(); ++i) {
    ++m.confusion[static_cast<size_t>(emotion_index(truth[i]))]
                 [static_cast<size_t>(emotion_index(preds[i]))];
  }
  int correct = 0;
  double recall_sum = 0.0;
  int present = 0;
  for (size_t c = 0; c < kNumEmotions; ++c) {
    correct += m.confusion[c][c];
    const int row = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), 0);
    if (row > 0) {
      recall_sum += static_cast<double>(m.confusion[c][c]) / row;
      ++present;
    }
  }
  m.wa = static_cast<double>(correct) / static_cast<double>(truth.size());
  m.ua = recall_sum / present;
  return m;
}

void check_speaker_disjoint(const Dataset& train, const Dataset& test) {
  std::unordered_set<std::string> train_speakers;
  for (const LabeledSequence& s : train) train_speakers.insert(s.speaker_id);
  for (const LabeledSequence& s : test) {
    if (train_speakers.count(s.speaker_id)) {
      throw std::invalid_argument("evaluate: speaker '" + s.speaker_id +
                                  "' appears in both train and test; refusing to run");
    }
  }
}

EvalResult evaluate(std::span<const std::pair<Dataset, Dataset>> folds, const Pipeline& pipeline,
                    int repeats, uint64_t base_seed) {
  if (folds.empty()) throw std::invalid_argument("evaluate: no folds");
  if (repeats < 1) throw std::invalid_argument("evaluate: repeats must be >= 1");
  for (const auto& [train, test] : folds) {
    check_speaker_disjoint(train, test);
    labels_of(test);
  }
  EvalResult result;
  result.folds = static_cast<int>(folds.size());
  for (int r = 0; r < repeats; ++r) {
    const uint64_t seed = base_seed + static_cast<uint64_t>(r);
    std::vector<Emotion> preds, truth;
    for (const auto& [train, test] : folds) {
      const std::vector<Emotion> p = pipeline(train, test, seed);
      if (p.size() != test.size()) throw std::runtime_error("evaluate: pipeline returned wrong count");
      preds.insert(preds.end(), p.begin(), p.end());
      const std::vector<Emotion> t = labels_of(test);
      truth.insert(truth.end(), t.begin(), t.end());
    }
    const Metrics m = weighted_accuracy(preds, truth);
    result.wa_per_repeat.push_back(m.wa);
    result.ua_per_repeat.push_back(m.ua);
    result.confusion = m.confusion;
  }
  result.wa_mean = mean_of(result.wa_per_repeat);
  result.ua_mean = mean_of(result.ua_per_repeat);
  result.wa_std = population_std(result.wa_per_repeat);
  result.ua_std = population_std(result.ua_per_repeat);
  return result;
}

std::pair<Dataset, Dataset> select_split(const Dataset& all, const Split& split) {
  std::unordered_map<std::string, const LabeledSequence*> by_id;
  for (const LabeledSequence& s : all) by_id[s.id] = &s;
  auto pick = [&](const CorpusManifest& m) {
    Dataset out;
    for (const Utterance& u : m.utterances) {
      auto it = by_id.find(u.id);
      if (it == by_id.end()) throw std::invalid_argument("select_split: unknown id " + u.id);
      out.push_back(*it->second);
    }
    return out;
  };
  return {pick(split.first), pick(split.second)};
}

Pipeline make_finetune_pipeline(const Checkpoint* init, const FopConfig& fresh_cfg,
                                const TrainConfig& train_cfg, const FrameConfig& frames) {
  return [=](const Dataset& train, const Dataset& test, uint64_t seed) {
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    const Checkpoint ckpt = finetune(init, fresh_cfg, train, tc, frames);
    return predict_labels(ckpt, test);
  };
}

Pipeline make_hypercolumn_pipeline(const Checkpoint* model, FeatureKind kind,
                                   ClassifierKind clf_kind, const ClassifierConfig& clf_cfg) {
  return [=](const Dataset& train, const Dataset& test, uint64_t seed) {
    const Matrix<double> x_train = pooled_features(model, train, kind);
    const std::vector<Emotion> y_train = labels_of(train);
    Rng rng(seed);
    const LinearClassifier clf = train_classifier(x_train, y_train, clf_kind, clf_cfg, rng);
    const Matrix<double> x_test = pooled_features(model, test, kind);
    std::vector<Emotion> out;
    for (Eigen::Index i = 0; i < x_test.rows(); ++i) out.push_back(classify(clf, x_test.row(i)).label);
    return out;
  };
}

std::string format_summary(const EvalResult& r) {
  std::ostringstream out;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  out << "repeats=" << r.wa_per_repeat.size() << "\n";
  out << "folds=" << r.folds << "\n";
  out << "wa_mean=" << num(r.wa_mean) << "\n";
  out << "wa_std=" << num(r.wa_std) << "\n";
  out << "ua_mean=" << num(r.ua_mean) << "\n";
  out << "ua_std=" << num(r.ua_std) << "\n";
  for (size_t i = 0; i < r.wa_per_repeat.size(); ++i) {
    out << "wa_repeat_" << i << "=" << num(r.wa_per_repeat[i]) << "\n";
    out << "ua_repeat_" << i << "=" << num(r.ua_per_repeat[i]) << "\n";
  }
  for (int t = 0; t < kNumEmotions; ++t) {
    for (int p = 0; p < kNumEmotions; ++p) {
      out << "confusion_" << emotion_name(static_cast<Emotion>(t)) << "_"
          << emotion_name(static_cast<Emotion>(p)) << "="
          << r.confusion[static_cast<size_t>(t)][static_cast<size_t>(p)] << "\n";
    }
  }
  return out.str();
}

std::string format_table(const EvalResult& r) {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-8s %10s %10s\n", "metric", "mean", "std");
  out << buf;
  std::snprintf(buf, sizeof buf, "%-8s %10.4f %10.4f\n", "WA", r.wa_mean, r.wa_std);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-8s %10.4f %10.4f\n", "UA", r.ua_mean, r.ua_std);
  out << buf;
  out << "\nconfusion (rows = truth, cols = predicted; final repeat)\n";
  std::snprintf(buf, sizeof buf, "%-8s", "");
  out << buf;
  for (Emotion e : kAllEmotions) {
    std::snprintf(buf, sizeof buf, " %8s", std::string(emotion_name(e)).c_str());
    out << buf;
  }
  out << "\n";
  for (Emotion t : kAllEmotions) {
    std::snprintf(buf, sizeof buf, "%-8s", std::string(emotion_name(t)).c_str());
    out << buf;
    for (Emotion p : kAllEmotions) {
      std::snprintf(buf, sizeof buf, " %8d",
                    r.confusion[static_cast<size_t>(emotion_index(t))]
                               [static_cast<size_t>(emotion_index(p))]);
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

GradSuiteResult run_gradient_suite(uint64_t seed, const GradCheckOptions& options,
                                   double param_jitter) {
  FopConfig cfg;
  cfg.d_feat = 6;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 11;
  cfg.n_layers = 2;
  cfg.dropout_p = 0.0;
  Rng rng(seed);
  FopParams<double> params = init_params<double>(cfg, rng);
  FinetuneHead<double> head = init_head<double>(cfg.d_model, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto jitter = [&](auto refs) {
    for (auto& r : refs) {
      for (Eigen::Index i = 0; i < r.tensor->size(); ++i) r.tensor->data()[i] += param_jitter * normal(rng);
    }
  };
  jitter(params.refs());
  jitter(head.refs());
  Matrix<double> x(5, cfg.d_feat);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  const Emotion label = Emotion::kSad;

  auto named = [](FopParams<double>& p, FopParams<double>& g) {
    std::vector<NamedParam> out;
    auto pr = p.refs();
    auto gr = g.refs();
    for (size_t i = 0; i < pr.size(); ++i) out.push_back({pr[i].name, pr[i].tensor, gr[i].tensor});
    return out;
  };

  GradSuiteResult result;
  {
    FopParams<double> grads = FopParams<double>::zeros(cfg);
    Rng unused(0);
    fop_loss_and_grad(x, params, cfg, Mode::kEval, unused, grads);
    const auto loss = [&] {
      Rng r(0);
      return fop_loss(x, params, cfg, Mode::kEval, r);
    };
    result.fop = grad_check(loss, named(params, grads), options);
  }
  {
    FopParams<double> grads = FopParams<double>::zeros(cfg);
    FinetuneHead<double> head_grads = FinetuneHead<double>::zeros(cfg.d_model);
    Rng unused(0);
    finetune_loss_and_grad(x, label, params, head, cfg, Mode::kEval, unused, &grads, head_grads);
    std::vector<NamedParam> list = named(params, grads);
    auto hp = head.refs();
    auto hg = head_grads.refs();
    for (size_t i = 0; i < hp.size(); ++i) list.push_back({hp[i].name, hp[i].tensor, hg[i].tensor});
    const auto loss = [&] {
      Rng r(0);
      return finetune_loss(x, label, params, head, cfg, Mode::kEval, r);
    };
    result.finetune = grad_check(loss, list, options);
  }
  return result;
}

}  // namespace fopser
