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

// Command-line front end. Hyperparameters are options of the top-level app
// (so they may appear before or after the subcommand, and in the --config
// file as plain `key = value` lines); file arguments belong to subcommands.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fopser/checkpoint.h"
#include "fopser/corpus.h"
#include "fopser/errors.h"
#include "fopser/features.h"
#include "fopser/fop_model.h"
#include "fopser/harness.h"
#include "fopser/numerics.h"
#include "fopser/transfer.h"

namespace fs = std::filesystem;

namespace fopser {
namespace {

struct Options {
  uint64_t seed = 0;
  FopConfig model;
  bool add_compat = false;
  TrainConfig train;
  bool no_early_stop = false;
  ClassifierConfig clf;
  FrameConfig frames;
};

std::optional<Checkpoint> load_optional(const std::string& path) {
  if (path.empty() || path == "none") return std::nullopt;
  return load_checkpoint(path);
}

FopConfig model_config(const Options& o) {
  FopConfig cfg = o.model;
  if (o.add_compat) {
    const FopConfig compat = FopConfig::hypercolumn_add_compat();
    cfg.d_model = compat.d_model;
    cfg.n_heads = compat.n_heads;
    cfg.d_ff = compat.d_ff;
  }
  cfg.d_feat = o.frames.n_mels;
  return cfg;
}

TrainConfig train_config(const Options& o) {
  TrainConfig t = o.train;
  t.seed = o.seed;
  t.early_stopping = !o.no_early_stop;
  return t;
}

void print_history(const TrainHistory& h) {
  for (const EpochLog& e : h.epochs) {
    std::printf("epoch %3d  train_loss %.6f  monitor %.6f\n", e.epoch, e.train_loss, e.monitor);
  }
  std::printf("best_epoch %d\n", h.best_epoch);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void print_report(const char* title, const GradReport& report) {
  std::printf("%s\n", title);
  for (const auto& e : report.entries) {
    std::printf("  %-22s coords %4zu  max_rel_err %.3e\n", e.name.c_str(), e.coords_checked,
                e.max_rel_error);
  }
  std::printf("  max %.3e (threshold %.1e) %s\n", report.max_rel_error, report.threshold,
              report.passed ? "ok" : "FAILED");
}

int run_gradcheck(uint64_t seed, size_t coords) {
  GradCheckOptions opts;
  opts.max_coords_per_tensor = coords;
  opts.seed = seed;
  const GradSuiteResult r = run_gradient_suite(seed, opts);
  print_report("fop_loss", r.fop);
  print_report("finetune_ce", r.finetune);
  return r.passed() ? 0 : 1;
}

}  // namespace
}  // namespace fopser

int main(int argc, char** argv) {
  using namespace fopser;
  CLI::App app{"Future-observation-prediction pre-training and transfer for speech emotion recognition"};
  app.set_config("--config", "", "Read `key = value` option lines from a file", false);
  app.require_subcommand(1);
  app.fallthrough();

  Options o;
  app.add_option("--seed", o.seed, "Base seed for every random stream")->capture_default_str();
  auto* model_group = app.add_option_group("model");
  model_group->add_option("--d-model", o.model.d_model)->capture_default_str();
  model_group->add_option("--heads", o.model.n_heads)->capture_default_str();
  model_group->add_option("--d-ff", o.model.d_ff)->capture_default_str();
  model_group->add_option("--layers", o.model.n_layers)->capture_default_str();
  model_group->add_option("--max-len", o.model.max_len)->capture_default_str();
  model_group->add_flag("--hypercolumn-add-compat", o.add_compat,
                        "Use d_model = d_feat = 80 so the add hypercolumn is defined");
  auto* train_group = app.add_option_group("training");
  train_group->add_option("--lr", o.train.lr)->capture_default_str();
  train_group->add_option("--batch-size", o.train.batch_size)->capture_default_str();
  train_group->add_option("--epochs", o.train.max_epochs)->capture_default_str();
  train_group->add_option("--patience", o.train.patience)->capture_default_str();
  train_group->add_option("--val-fraction", o.train.val_fraction)->capture_default_str();
  train_group->add_option("--dropout", o.train.dropout_p)->capture_default_str();
  train_group->add_flag("--no-early-stop", o.no_early_stop, "Always run --epochs epochs");
  auto* clf_group = app.add_option_group("classifier");
  clf_group->add_option("--clf-lr", o.clf.lr)->capture_default_str();
  clf_group->add_option("--clf-epochs", o.clf.max_epochs)->capture_default_str();
  clf_group->add_option("--clf-l2", o.clf.l2)->capture_default_str();
  clf_group->add_option("--clf-batch-size", o.clf.batch_size)->capture_default_str();
  auto* frame_group = app.add_option_group("frames");
  frame_group->add_option("--sample-rate", o.frames.sample_rate)->capture_default_str();
  frame_group->add_option("--n-mels", o.frames.n_mels)->capture_default_str();
  frame_group->add_option("--n-fft", o.frames.n_fft)->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic labeled corpus and manifest.csv");
  std::string synth_out;
  SynthSpec spec;
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--speakers", spec.n_speakers)->capture_default_str();
  synth->add_option("--per-speaker", spec.utterances_per_speaker)->capture_default_str();
  synth->add_option("--duration", spec.duration_s)->capture_default_str();

  // featurize
  auto* featurize_cmd = app.add_subcommand("featurize", "Compute log-mel features (FOPF files)");
  std::string manifest_path, out_path;
  featurize_cmd->add_option("--manifest", manifest_path)->required();
  featurize_cmd->add_option("--out", out_path, "Output directory")->required();

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Next-frame prediction pre-training");
  pretrain_cmd->add_option("--manifest", manifest_path)->required();
  pretrain_cmd->add_option("--out", out_path, "Checkpoint path")->required();

  // finetune
  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune with a fresh classification head");
  std::string init_path = "none";
  bool freeze = false;
  finetune_cmd->add_option("--manifest", manifest_path)->required();
  finetune_cmd->add_option("--init", init_path, "Checkpoint to start from, or none")
      ->capture_default_str();
  finetune_cmd->add_flag("--freeze-body", freeze, "Only train the head");
  finetune_cmd->add_option("--out", out_path, "Checkpoint path")->required();

  // extract
  auto* extract_cmd = app.add_subcommand("extract", "Write per-frame and pooled features");
  std::string model_path = "none", kind_name = "concat";
  extract_cmd->add_option("--manifest", manifest_path)->required();
  extract_cmd->add_option("--model", model_path, "Checkpoint (none only for --kind F)")
      ->capture_default_str();
  extract_cmd->add_option("--kind", kind_name, "F|h1|h2|...|add|concat")->capture_default_str();
  extract_cmd->add_option("--out", out_path, "Output directory")->required();

  // train-clf
  auto* clf_cmd = app.add_subcommand("train-clf", "Train a linear classifier on pooled features");
  std::string clf_name = "softmax";
  clf_cmd->add_option("--manifest", manifest_path)->required();
  clf_cmd->add_option("--model", model_path)->capture_default_str();
  clf_cmd->add_option("--kind", kind_name)->capture_default_str();
  clf_cmd->add_option("--clf", clf_name, "softmax|svm")->capture_default_str();
  clf_cmd->add_option("--out", out_path, "Classifier path")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Speaker-independent evaluation with repeats");
  std::string method = "finetune", kfold, summary_path;
  int test_speakers = 0;
  int repeats = 1;
  eval_cmd->add_option("--manifest", manifest_path)->required();
  eval_cmd->add_option("--method", method, "finetune|hypercolumn")->capture_default_str();
  eval_cmd->add_option("--init", init_path, "finetune: checkpoint or none")->capture_default_str();
  eval_cmd->add_flag("--freeze-body", freeze);
  eval_cmd->add_option("--model", model_path, "hypercolumn: checkpoint")->capture_default_str();
  eval_cmd->add_option("--kind", kind_name)->capture_default_str();
  eval_cmd->add_option("--clf", clf_name)->capture_default_str();
  eval_cmd->add_option("--repeats", repeats)->capture_default_str();
  auto* kfold_opt = eval_cmd->add_option("--kfold", kfold, "sessions:K");
  auto* speakers_opt =
      eval_cmd->add_option("--test-speakers", test_speakers, "Hold out the first N speakers");
  kfold_opt->excludes(speakers_opt);
  eval_cmd->add_option("--summary", summary_path, "key=value summary file");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check on a tiny model");
  size_t coords = 0;
  grad_cmd->add_option("--coords", coords, "Max coordinates per tensor (0 = all)")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      spec.seed = o.seed;
      spec.sample_rate = o.frames.sample_rate;
      const CorpusManifest m = synth_corpus(spec, synth_out);
      std::printf("wrote %zu utterances to %s\n", m.utterances.size(), synth_out.c_str());
      return 0;
    }
    if (*grad_cmd) return run_gradcheck(o.seed, coords);

    const CorpusManifest manifest = load_manifest(manifest_path);
    if (*featurize_cmd) {
      fs::create_directories(out_path);
      for (const Utterance& u : manifest.utterances) {
        write_features(log_mel(read_wav(manifest.resolve(u)), o.frames),
                       fs::path(out_path) / (u.id + ".fopf"));
      }
      std::printf("wrote %zu feature files to %s\n", manifest.utterances.size(), out_path.c_str());
      return 0;
    }
    if (*pretrain_cmd) {
      TrainHistory h;
      const Checkpoint ckpt =
          pretrain(manifest, model_config(o), train_config(o), o.frames, &h);
      print_history(h);
      save_checkpoint(ckpt, out_path);
      std::printf("saved %s\n", out_path.c_str());
      return 0;
    }
    if (*finetune_cmd) {
      const std::optional<Checkpoint> init = load_optional(init_path);
      TrainConfig t = train_config(o);
      t.freeze_body = freeze;
      TrainHistory h;
      const Checkpoint ckpt =
          finetune(init ? &*init : nullptr, model_config(o), manifest, t, o.frames, &h);
      print_history(h);
      save_checkpoint(ckpt, out_path);
      std::printf("saved %s\n", out_path.c_str());
      return 0;
    }

    const std::optional<Checkpoint> model = load_optional(model_path);
    const FrameConfig& frames = model ? model->frames : o.frames;
    const FeatureKind kind = FeatureKind::parse(kind_name);
    if (*extract_cmd) {
      fs::create_directories(out_path);
      for (const Utterance& u : manifest.utterances) {
        const Matrix<float> raw = log_mel(read_wav(manifest.resolve(u)), frames).frames;
        const HypercolumnFeature f = extract_utterance(model ? &*model : nullptr, raw, kind);
        FeatureSequence seq{f.frames, frames};
        write_features(seq, fs::path(out_path) / (u.id + "." + kind.name() + ".fopf"));
        FeatureSequence pooled{f.pooled, frames};
        write_features(pooled, fs::path(out_path) / (u.id + "." + kind.name() + ".pooled.fopf"));
      }
      std::printf("wrote %zu utterances (%s) to %s\n", manifest.utterances.size(),
                  kind.name().c_str(), out_path.c_str());
      return 0;
    }
    if (*clf_cmd) {
      const Dataset data = featurize(manifest, frames);
      Rng rng(derive_seed(o.seed, 4));
      const LinearClassifier clf =
          train_classifier(pooled_features(model ? &*model : nullptr, data, kind), labels_of(data),
                           parse_classifier_kind(clf_name), o.clf, rng);
      save_classifier(clf, kind, out_path);
      std::printf("saved %s (%ld inputs, %d epochs)\n", out_path.c_str(),
                  static_cast<long>(clf.dim()), clf.epochs_run);
      return 0;
    }
    if (*eval_cmd) {
      const std::optional<Checkpoint> init = load_optional(init_path);
      const FrameConfig& fc = method == "finetune" && init ? init->frames : frames;
      const Dataset all = featurize(manifest, fc);
      std::vector<Split> splits;
      if (!kfold.empty()) {
        const std::string prefix = "sessions:";
        if (kfold.rfind(prefix, 0) != 0) throw std::invalid_argument("--kfold expects sessions:K");
        splits = kfold_by_session(manifest, std::stoi(kfold.substr(prefix.size())));
      } else if (test_speakers > 0) {
        splits.push_back(split_speaker_independent(manifest, test_speakers));
      } else {
        throw std::invalid_argument("eval needs --kfold sessions:K or --test-speakers N");
      }
      std::vector<std::pair<Dataset, Dataset>> folds;
      for (const Split& s : splits) folds.push_back(select_split(all, s));
      Pipeline pipeline;
      if (method == "finetune") {
        TrainConfig t = train_config(o);
        t.freeze_body = freeze;
        pipeline = make_finetune_pipeline(init ? &*init : nullptr, model_config(o), t, fc);
      } else if (method == "hypercolumn") {
        pipeline = make_hypercolumn_pipeline(model ? &*model : nullptr, kind,
                                             parse_classifier_kind(clf_name), o.clf);
      } else {
        throw std::invalid_argument("unknown --method '" + method + "'");
      }
      const EvalResult r = evaluate(folds, pipeline, repeats, o.seed);
      std::cout << format_table(r);
      if (!summary_path.empty()) write_text(summary_path, format_summary(r));
      return 0;
    }
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error [%s]: %s\n", std::string(format_error_name(e.code())).c_str(),
                 e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
