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

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include "oracles.h"

namespace fopser {
namespace {

namespace fs = std::filesystem;

using E = Emotion;

FopConfig tiny_model() {
  FopConfig c;
  c.d_feat = 6;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 11;
  c.n_layers = 2;
  return c;
}

// Labeled random sequences whose mean encodes the class.
Dataset toy_dataset(int speakers, int per, uint64_t seed, int len = 12,
                    const std::string& prefix = "spk") {
  Rng rng(seed);
  std::normal_distribution<float> n(0, 1);
  Dataset d;
  for (int s = 0; s < speakers; ++s)
    for (int u = 0; u < per; ++u) {
      LabeledSequence x;
      x.id = prefix + std::to_string(s) + "u" + std::to_string(u);
      x.speaker_id = prefix + std::to_string(s);
      x.session_id = "ses" + std::to_string(s / 2);
      x.label = static_cast<Emotion>(u % 4);
      x.frames.resize(len, 6);
      for (Eigen::Index i = 0; i < x.frames.size(); ++i) x.frames.data()[i] = n(rng);
      x.frames.col(u % 4).array() += 3.0f;
      d.push_back(std::move(x));
    }
  return d;
}

TEST(TrainConfigTest, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  EXPECT_EQ(t.batch_size, 32);
  EXPECT_DOUBLE_EQ(t.lr, 1e-3);
  t.val_fraction = 1.0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t = {};
  t.patience = 0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}

TEST(MetricsTest, HandCounts) {
  const std::vector<E> all_a{E::kAngry, E::kAngry, E::kAngry, E::kAngry};
  Metrics m = weighted_accuracy(all_a, std::vector<E>{E::kAngry, E::kAngry, E::kHappy, E::kHappy});
  EXPECT_EQ(m.wa, 0.5);
  EXPECT_EQ(m.ua, 0.5);
  m = weighted_accuracy(all_a, std::vector<E>{E::kAngry, E::kAngry, E::kAngry, E::kHappy});
  EXPECT_EQ(m.wa, 0.75);
  EXPECT_EQ(m.ua, 0.5);
  m = weighted_accuracy(all_a, all_a);
  EXPECT_EQ(m.wa, 1.0);
  EXPECT_EQ(m.ua, 1.0);
  EXPECT_EQ(m.confusion[0][0], 4);
}

TEST(MetricsTest, RandomMatchesOracleAndConfusion) {
  Rng rng(3);
  std::uniform_int_distribution<int> c(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> p(37), t(37);
    std::vector<E> pe, te;
    for (int i = 0; i < 37; ++i) {
      p[static_cast<size_t>(i)] = c(rng);
      t[static_cast<size_t>(i)] = trial % 5 == 0 ? c(rng) % 2 : c(rng);
      pe.push_back(static_cast<E>(p[static_cast<size_t>(i)]));
      te.push_back(static_cast<E>(t[static_cast<size_t>(i)]));
    }
    const Metrics m = weighted_accuracy(pe, te);
    const oracle::HandCount h = oracle::hand_count(p, t);
    EXPECT_EQ(m.wa, h.wa);
    EXPECT_EQ(m.ua, h.ua);
    int total = 0, trace = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        total += m.confusion[static_cast<size_t>(i)][static_cast<size_t>(j)];
        if (i == j) trace += m.confusion[static_cast<size_t>(i)][static_cast<size_t>(j)];
      }
    EXPECT_EQ(total, 37);
    EXPECT_EQ(m.wa, static_cast<double>(trace) / total);
  }
}

TEST(MetricsTest, Errors) {
  EXPECT_THROW(weighted_accuracy(std::vector<E>{E::kSad}, std::vector<E>{}), std::invalid_argument);
  EXPECT_THROW(weighted_accuracy(std::vector<E>{}, std::vector<E>{}), std::invalid_argument);
}

TEST(SplitValidationTest, StratifiedBySpeaker) {
  const Dataset d = toy_dataset(3, 10, 0);
  Rng a(5), b(5);
  const auto [train, val] = split_validation(d, 0.2, a);
  EXPECT_EQ(val.size(), 6u);
  EXPECT_EQ(train.size(), 24u);
  std::map<std::string, int> per;
  for (const auto& s : val) ++per[s.speaker_id];
  for (const auto& [k, n] : per) EXPECT_EQ(n, 2) << k;
  std::set<std::string> ids;
  for (const auto& s : train) ids.insert(s.id);
  for (const auto& s : val) EXPECT_EQ(ids.count(s.id), 0u);
  const auto again = split_validation(d, 0.2, b);
  for (size_t i = 0; i < val.size(); ++i) EXPECT_EQ(again.second[i].id, val[i].id);
}

TEST(SplitValidationTest, KeepsOneForTraining) {
  const Dataset d = toy_dataset(2, 1, 0);
  Rng rng(0);
  const auto [train, val] = split_validation(d, 0.9, rng);
  EXPECT_EQ(train.size(), 2u);
  EXPECT_TRUE(val.empty());
}

TEST(ChunkTest, ConsecutivePieces) {
  Matrix<float> f(7, 2);
  for (int i = 0; i < 14; ++i) f.data()[i] = static_cast<float>(i);
  const auto parts = chunk_frames(f, 3);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[2].rows(), 1);
  EXPECT_EQ(parts[1](0, 0), f(3, 0));
  EXPECT_EQ(chunk_frames(f, 10).size(), 1u);
}

TEST(BatchTest, CoversEveryIndexOnce) {
  const std::vector<Eigen::Index> lengths{5, 9, 5, 3, 9, 9, 1, 4, 7, 2};
  Rng rng(1);
  const auto batches = make_batches(lengths, 3, rng);
  EXPECT_EQ(batches.size(), 4u);
  std::multiset<size_t> seen;
  for (const auto& b : batches) {
    EXPECT_LE(b.size(), 3u);
    for (size_t i : b) seen.insert(i);
  }
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(std::set<size_t>(seen.begin(), seen.end()).size(), 10u);
  // Length buckets: within a batch the spread is bounded by sorted order.
  for (const auto& b : batches) {
    Eigen::Index lo = 100, hi = 0;
    for (size_t i : b) lo = std::min(lo, lengths[i]), hi = std::max(hi, lengths[i]);
    EXPECT_LE(hi - lo, 4);
  }
}

TEST(PretrainTest, BestCheckpointAndEarlyStopBound) {
  const Dataset d = toy_dataset(3, 8, 1);
  TrainConfig t;
  t.max_epochs = 15;
  t.patience = 2;
  t.val_fraction = 0.25;
  t.batch_size = 4;
  t.lr = 3e-3;
  TrainHistory h;
  const Checkpoint ck = pretrain(d, tiny_model(), t, FrameConfig{}, &h);
  EXPECT_EQ(ck.provenance.stage, "pretrain");
  EXPECT_LE(ck.provenance.epochs_run, t.max_epochs);
  EXPECT_EQ(static_cast<int>(h.epochs.size()), ck.provenance.epochs_run);
  EXPECT_LE(ck.provenance.epochs_run, h.best_epoch + t.patience);
  EXPECT_LE(ck.provenance.best_val_score, ck.provenance.final_val_score);
  EXPECT_LT(ck.provenance.final_train_loss, ck.provenance.initial_train_loss);
  EXPECT_EQ(ck.norm.mean.size(), 6);
  EXPECT_FALSE(ck.head.has_value());
}

TEST(PretrainTest, SeededDeterminism) {
  const Dataset d = toy_dataset(2, 6, 2);
  TrainConfig t;
  t.max_epochs = 3;
  t.seed = 11;
  const auto a = encode_checkpoint(pretrain(d, tiny_model(), t, FrameConfig{}));
  const auto b = encode_checkpoint(pretrain(d, tiny_model(), t, FrameConfig{}));
  EXPECT_EQ(a, b);
  t.seed = 12;
  EXPECT_NE(a, encode_checkpoint(pretrain(d, tiny_model(), t, FrameConfig{})));
}

TEST(PretrainTest, Errors) {
  EXPECT_THROW(pretrain(Dataset{}, tiny_model(), {}, FrameConfig{}), std::invalid_argument);
  const Dataset one_frame = toy_dataset(2, 3, 0, 1);
  EXPECT_THROW(pretrain(one_frame, tiny_model(), {}, FrameConfig{}), std::invalid_argument);
}

TEST(FinetuneTest, HeadShapeAndFrozenBody) {
  const Dataset d = toy_dataset(2, 8, 3);
  TrainConfig t;
  t.max_epochs = 2;
  const Checkpoint scratch = finetune(nullptr, tiny_model(), d, t, FrameConfig{});
  ASSERT_TRUE(scratch.head.has_value());
  EXPECT_EQ(scratch.head->w_y.rows(), 8);
  EXPECT_EQ(scratch.head->w_y.cols(), 4);
  EXPECT_EQ(scratch.provenance.stage, "finetune");

  t.freeze_body = true;
  const Checkpoint frozen = finetune(&scratch, tiny_model(), d, t, FrameConfig{});
  EXPECT_EQ(encode_checkpoint([&] { Checkpoint c = frozen; c.head.reset(); c.provenance = {}; return c; }()),
            encode_checkpoint([&] { Checkpoint c = scratch; c.head.reset(); c.provenance = {}; return c; }()));
  EXPECT_EQ(frozen.norm.mean, scratch.norm.mean);
}

TEST(FinetuneTest, LearnsSeparableToy) {
  const Dataset train = toy_dataset(4, 12, 4);
  const Dataset test = toy_dataset(2, 8, 5, 12, "tst");
  TrainConfig t;
  t.max_epochs = 40;
  t.batch_size = 8;
  t.lr = 1e-2;
  t.dropout_p = 0.0;
  t.early_stopping = false;
  const Checkpoint ck = finetune(nullptr, tiny_model(), train, t, FrameConfig{});
  const Metrics m = weighted_accuracy(predict_labels(ck, test), labels_of(test));
  EXPECT_GE(m.wa, 0.9);
}

TEST(FinetuneTest, RejectsUnlabeled) {
  Dataset d = toy_dataset(2, 4, 0);
  d[3].label.reset();
  EXPECT_THROW(finetune(nullptr, tiny_model(), d, {}, FrameConfig{}), std::invalid_argument);
}

TEST(EvaluateTest, SeedsAndRepeats) {
  const Dataset d = toy_dataset(4, 4, 0);
  std::vector<std::pair<Dataset, Dataset>> folds{{Dataset(d.begin(), d.begin() + 8), Dataset(d.begin() + 8, d.end())}};
  std::vector<uint64_t> seeds;
  const Pipeline constant = [&](const Dataset&, const Dataset& test, uint64_t seed) {
    seeds.push_back(seed);
    return std::vector<E>(test.size(), seed % 2 ? E::kHappy : E::kAngry);
  };
  const EvalResult one = evaluate(folds, constant, 1, 10);
  EXPECT_EQ(one.wa_std, 0.0);
  EXPECT_EQ(one.wa_mean, one.wa_per_repeat[0]);
  seeds.clear();
  const EvalResult three = evaluate(folds, constant, 3, 10);
  EXPECT_EQ(seeds, (std::vector<uint64_t>{10, 11, 12}));
  EXPECT_EQ(three.wa_per_repeat.size(), 3u);
  EXPECT_DOUBLE_EQ(three.wa_mean, 0.25);
  EXPECT_EQ(three.wa_std, 0.0);
  EXPECT_EQ(three.confusion[0][0], 2);  // final repeat (seed 12) predicts angry
}

TEST(EvaluateTest, RefusesSpeakerOverlap) {
  const Dataset d = toy_dataset(2, 4, 0);
  std::vector<std::pair<Dataset, Dataset>> folds{{d, Dataset(d.begin(), d.begin() + 1)}};
  const Pipeline p = [](const Dataset&, const Dataset& test, uint64_t) {
    return std::vector<E>(test.size(), E::kSad);
  };
  EXPECT_THROW(evaluate(folds, p, 1, 0), std::invalid_argument);
}

TEST(EvaluateTest, PoolsFoldsWithinRepeat) {
  const Dataset d = toy_dataset(4, 4, 0);
  std::vector<std::pair<Dataset, Dataset>> folds;
  for (int f = 0; f < 2; ++f) {
    Dataset train, test;
    for (const auto& s : d) (s.session_id == "ses" + std::to_string(f) ? test : train).push_back(s);
    folds.emplace_back(train, test);
  }
  const Pipeline truth = [](const Dataset&, const Dataset& test, uint64_t) { return labels_of(test); };
  const EvalResult r = evaluate(folds, truth, 2, 0);
  EXPECT_EQ(r.wa_mean, 1.0);
  EXPECT_EQ(r.folds, 2);
  int total = 0;
  for (const auto& row : r.confusion)
    for (int v : row) total += v;
  EXPECT_EQ(total, 16);
}

TEST(SummaryTest, KeyValueLines) {
  EvalResult r;
  r.wa_per_repeat = {0.5, 1.0};
  r.ua_per_repeat = {0.25, 0.75};
  r.wa_mean = 0.75;
  r.wa_std = 0.25;
  r.ua_mean = 0.5;
  r.ua_std = 0.25;
  r.folds = 1;
  r.confusion[1][2] = 3;
  const std::string s = format_summary(r);
  EXPECT_NE(s.find("wa_mean=0.750000\n"), std::string::npos);
  EXPECT_NE(s.find("wa_repeat_1=1.000000\n"), std::string::npos);
  EXPECT_NE(s.find("confusion_happy_sad=3\n"), std::string::npos);
  EXPECT_NE(format_table(r).find("WA"), std::string::npos);
}

TEST(HypercolumnPipelineTest, InputBaselineWithoutModel) {
  const Dataset train = toy_dataset(4, 12, 7);
  const Dataset test = toy_dataset(2, 8, 8, 12, "tst");
  const Pipeline p = make_hypercolumn_pipeline(nullptr, FeatureKind::parse("F"), ClassifierKind::kSoftmax, {});
  std::vector<std::pair<Dataset, Dataset>> folds{{train, test}};
  EXPECT_EQ(evaluate(folds, p, 1, 0).wa_mean, 1.0);
  EXPECT_THROW(make_hypercolumn_pipeline(nullptr, FeatureKind::parse("concat"), ClassifierKind::kSoftmax, {})(train, test, 0),
               std::invalid_argument);
}

int run(const std::string& args) {
  const std::string cmd = std::string(FOPSER_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TEST(CliTest, EndToEndSmallRun) {
  const fs::path dir = oracle::temp_dir("cli");
  const std::string d = dir.string();
  ASSERT_EQ(run("synth --out " + d + "/c --speakers 4 --per-speaker 4 --duration 0.3"), 0);
  {
    std::ofstream cfg(dir / "cfg.txt");
    cfg << "d-model = 16\nd-ff = 24\nepochs = 2\n";
  }
  const std::string common = "--config " + d + "/cfg.txt --seed 3 ";
  ASSERT_EQ(run(common + "pretrain --manifest " + d + "/c/manifest.csv --out " + d + "/p.fopc"), 0);
  ASSERT_EQ(run(common + "finetune --manifest " + d + "/c/manifest.csv --init " + d + "/p.fopc --out " + d + "/f.fopc"), 0);
  ASSERT_EQ(run(common + "extract --manifest " + d + "/c/manifest.csv --model " + d + "/p.fopc --kind concat --out " + d + "/x"), 0);
  EXPECT_TRUE(fs::exists(dir / "x" / "spk01_utt001.concat.pooled.fopf"));
  ASSERT_EQ(run(common + "train-clf --manifest " + d + "/c/manifest.csv --model " + d + "/p.fopc --clf svm --out " + d + "/clf.fopc"), 0);
  ASSERT_EQ(run(common + "eval --manifest " + d + "/c/manifest.csv --method hypercolumn --model " + d +
                "/p.fopc --kind h1 --test-speakers 1 --repeats 2 --summary " + d + "/s.txt"),
            0);
  std::ifstream s(dir / "s.txt");
  const std::string text((std::istreambuf_iterator<char>(s)), {});
  EXPECT_NE(text.find("repeats=2"), std::string::npos);
  EXPECT_NE(run("featurize --manifest " + d + "/nope.csv --out " + d + "/f"), 0);
  EXPECT_EQ(run("finetune --manifest " + d + "/c/manifest.csv --init " + d + "/c/manifest.csv --out " + d + "/y"), 2);
  EXPECT_EQ(run("gradcheck --coords 3"), 0);
}

}  // namespace
}  // namespace fopser
