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

#include "fopser/checkpoint.h"

#include <zlib.h>

#include <charconv>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>

#include "binary_io.h"
#include "fopser/errors.h"

namespace fopser {

namespace {

constexpr char kMagic[4] = {'F', 'O', 'P', 'C'};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

FormatError bad_config(const std::string& what) {
  return FormatError(FormatErrorCode::kBadConfig, "checkpoint config: " + what);
}

const std::string& require(const Container& c, const std::string& key) {
  const std::string* v = c.find(key);
  if (v == nullptr) throw bad_config("missing key '" + key + "'");
  return *v;
}

int get_int(const Container& c, const std::string& key) {
  const std::string& s = require(c, key);
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw bad_config("'" + key + "' is not an integer: " + s);
  }
  return v;
}

uint64_t get_u64(const Container& c, const std::string& key) {
  const std::string& s = require(c, key);
  uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw bad_config("'" + key + "' is not an unsigned integer: " + s);
  }
  return v;
}

double get_double(const Container& c, const std::string& key) {
  const std::string& s = require(c, key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw bad_config("'" + key + "' is not a number: " + s);
  }
  return v;
}

template <typename Derived>
TensorRecord to_record(const std::string& name, const Eigen::MatrixBase<Derived>& m,
                       bool is_vector) {
  TensorRecord r;
  r.name = name;
  if (is_vector) {
    r.dims = {static_cast<uint32_t>(m.size())};
  } else {
    r.dims = {static_cast<uint32_t>(m.rows()), static_cast<uint32_t>(m.cols())};
  }
  r.data.reserve(static_cast<size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.data.push_back(static_cast<float>(m(i, j)));
  }
  return r;
}

// Copies a record into `out`, checking the dims against the expected shape.
template <typename T>
void from_record(const TensorRecord& r, Matrix<T>& out, bool is_vector) {
  const std::vector<uint32_t> want =
      is_vector ? std::vector<uint32_t>{static_cast<uint32_t>(out.size())}
                : std::vector<uint32_t>{static_cast<uint32_t>(out.rows()),
                                        static_cast<uint32_t>(out.cols())};
  if (r.dims != want) {
    std::string have;
    for (uint32_t d : r.dims) have += (have.empty() ? "" : "x") + std::to_string(d);
    std::string expect;
    for (uint32_t d : want) expect += (expect.empty() ? "" : "x") + std::to_string(d);
    throw FormatError(FormatErrorCode::kShapeMismatch,
                      "tensor " + r.name + " has shape " + have + ", config implies " + expect);
  }
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<T>(r.data[static_cast<size_t>(i)]);
}

class RecordIndex {
 public:
  explicit RecordIndex(const Container& c) {
    for (const TensorRecord& r : c.tensors) {
      if (!by_name_.emplace(r.name, &r).second) {
        throw FormatError(FormatErrorCode::kShapeMismatch, "duplicate tensor " + r.name);
      }
    }
  }
  const TensorRecord& take(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) {
      throw FormatError(FormatErrorCode::kShapeMismatch, "missing tensor " + name);
    }
    const TensorRecord* r = it->second;
    by_name_.erase(it);
    return *r;
  }
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  void expect_empty() const {
    if (!by_name_.empty()) {
      throw FormatError(FormatErrorCode::kShapeMismatch,
                        "unexpected tensor " + by_name_.begin()->first);
    }
  }

 private:
  std::map<std::string, const TensorRecord*> by_name_;
};

}  // namespace

const std::string* Container::find(const std::string& key) const {
  for (const auto& [k, v] : config) {
    if (k == key) return &v;
  }
  return nullptr;
}

uint32_t crc32_of(std::span<const uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<uint32_t>(crc);
}

std::vector<uint8_t> encode_container(const Container& c) {
  internal::ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  std::string text;
  for (const auto& [k, v] : c.config) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("container: config entry '" + k + "' is not encodable");
    }
    text += k + "=" + v + "\n";
  }
  w.u32(static_cast<uint32_t>(text.size()));
  w.str(text);
  w.u32(static_cast<uint32_t>(c.tensors.size()));
  for (const TensorRecord& t : c.tensors) {
    size_t n = 1;
    for (uint32_t d : t.dims) n *= d;
    if (n != t.data.size() || t.dims.size() > 255 || t.name.size() > 65535) {
      throw std::invalid_argument("container: tensor " + t.name + " is malformed");
    }
    w.u16(static_cast<uint16_t>(t.name.size()));
    w.str(t.name);
    w.u8(static_cast<uint8_t>(t.dims.size()));
    for (uint32_t d : t.dims) w.u32(d);
    w.raw(t.data.data(), sizeof(float) * t.data.size());
  }
  const auto& bytes = w.bytes();
  const uint32_t crc = crc32_of(std::span<const uint8_t>(bytes).subspan(4));
  w.u32(crc);
  return w.bytes();
}

Container decode_container(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(FormatErrorCode::kBadMagic, "not a FOPC file (bad magic)");
  }
  if (bytes.size() < 12) {
    throw FormatError(FormatErrorCode::kTruncated, "FOPC file is truncated");
  }
  uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorCode::kVersionMismatch,
                      "unsupported FOPC version " + std::to_string(version));
  }
  const auto body = bytes.subspan(4, bytes.size() - 8);
  uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(body) != stored_crc) {
    throw FormatError(FormatErrorCode::kCrcMismatch, "FOPC CRC32 mismatch (corrupt file)");
  }
  internal::ByteReader r(body.data(), body.size());
  r.skip(4);
  Container c;
  const std::string text = r.str(r.u32());
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw bad_config("line without '=': " + line);
    c.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = r.str(r.u16());
    const uint8_t rank = r.u8();
    uint64_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    if (n * sizeof(float) > r.remaining()) {
      throw FormatError(FormatErrorCode::kTruncated,
                        "tensor " + t.name + " payload runs past the end of the file");
    }
    t.data.resize(static_cast<size_t>(n));
    r.raw(t.data.data(), sizeof(float) * t.data.size());
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorCode::kTrailingData,
                      "header declares " + std::to_string(count) +
                          " tensors but payload has " + std::to_string(r.remaining()) +
                          " extra bytes");
  }
  return c;
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  check_shapes(ckpt.params, ckpt.config);
  Container c;
  const FopConfig& m = ckpt.config;
  const FrameConfig& f = ckpt.frames;
  const Provenance& p = ckpt.provenance;
  c.config = {
      {"artifact", "fop-model"},
      {"model.d_feat", std::to_string(m.d_feat)},
      {"model.d_model", std::to_string(m.d_model)},
      {"model.n_heads", std::to_string(m.n_heads)},
      {"model.d_ff", std::to_string(m.d_ff)},
      {"model.n_layers", std::to_string(m.n_layers)},
      {"model.dropout_p", format_double(m.dropout_p)},
      {"model.max_len", std::to_string(m.max_len)},
      {"model.positional_encoding", m.positional_encoding ? "1" : "0"},
      {"frames.sample_rate", std::to_string(f.sample_rate)},
      {"frames.win_ms", format_double(f.win_ms)},
      {"frames.hop_ms", format_double(f.hop_ms)},
      {"frames.n_fft", std::to_string(f.n_fft)},
      {"frames.n_mels", std::to_string(f.n_mels)},
      {"frames.fmin", format_double(f.fmin)},
      {"frames.fmax", format_double(f.fmax)},
      {"frames.log_floor", format_double(f.log_floor)},
      {"head", ckpt.head ? "1" : "0"},
      {"provenance.stage", p.stage},
      {"provenance.seed", std::to_string(p.seed)},
      {"provenance.epochs_run", std::to_string(p.epochs_run)},
      {"provenance.initial_train_loss", format_double(p.initial_train_loss)},
      {"provenance.final_train_loss", format_double(p.final_train_loss)},
      {"provenance.best_val_score", format_double(p.best_val_score)},
      {"provenance.final_val_score", format_double(p.final_val_score)},
  };
  for (const auto& r : ckpt.params.refs()) c.tensors.push_back(to_record(r.name, *r.tensor, r.is_vector));
  if (ckpt.head) {
    c.tensors.push_back(to_record("head.W_y", ckpt.head->w_y, false));
    c.tensors.push_back(to_record("head.b", ckpt.head->bias, true));
  }
  if (ckpt.norm.mean.size() != m.d_feat || ckpt.norm.std.size() != m.d_feat) {
    throw std::invalid_argument("checkpoint: norm stats width does not match d_feat");
  }
  c.tensors.push_back(to_record("norm.mean", ckpt.norm.mean, true));
  c.tensors.push_back(to_record("norm.std", ckpt.norm.std, true));
  return encode_container(c);
}

Checkpoint decode_checkpoint(std::span<const uint8_t> bytes) {
  const Container c = decode_container(bytes);
  if (require(c, "artifact") != "fop-model") throw bad_config("artifact is not fop-model");
  Checkpoint ckpt;
  FopConfig& m = ckpt.config;
  m.d_feat = get_int(c, "model.d_feat");
  m.d_model = get_int(c, "model.d_model");
  m.n_heads = get_int(c, "model.n_heads");
  m.d_ff = get_int(c, "model.d_ff");
  m.n_layers = get_int(c, "model.n_layers");
  m.dropout_p = get_double(c, "model.dropout_p");
  m.max_len = get_int(c, "model.max_len");
  m.positional_encoding = get_int(c, "model.positional_encoding") != 0;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw bad_config(e.what());
  }
  FrameConfig& f = ckpt.frames;
  f.sample_rate = get_int(c, "frames.sample_rate");
  f.win_ms = get_double(c, "frames.win_ms");
  f.hop_ms = get_double(c, "frames.hop_ms");
  f.n_fft = get_int(c, "frames.n_fft");
  f.n_mels = get_int(c, "frames.n_mels");
  f.fmin = get_double(c, "frames.fmin");
  f.fmax = get_double(c, "frames.fmax");
  f.log_floor = get_double(c, "frames.log_floor");
  Provenance& p = ckpt.provenance;
  p.stage = require(c, "provenance.stage");
  p.seed = get_u64(c, "provenance.seed");
  p.epochs_run = get_int(c, "provenance.epochs_run");
  p.initial_train_loss = get_double(c, "provenance.initial_train_loss");
  p.final_train_loss = get_double(c, "provenance.final_train_loss");
  p.best_val_score = get_double(c, "provenance.best_val_score");
  p.final_val_score = get_double(c, "provenance.final_val_score");

  RecordIndex index(c);
  ckpt.params = FopParams<float>::zeros(m);
  for (auto& r : ckpt.params.refs()) from_record(index.take(r.name), *r.tensor, r.is_vector);
  if (get_int(c, "head") != 0) {
    FinetuneHead<float> head = FinetuneHead<float>::zeros(m.d_model);
    from_record(index.take("head.W_y"), head.w_y, false);
    from_record(index.take("head.b"), head.bias, true);
    ckpt.head = std::move(head);
  }
  Matrix<float> mean = Matrix<float>::Zero(1, m.d_feat);
  Matrix<float> std = Matrix<float>::Zero(1, m.d_feat);
  from_record(index.take("norm.mean"), mean, true);
  from_record(index.take("norm.std"), std, true);
  ckpt.norm.mean = mean.row(0);
  ckpt.norm.std = std.row(0);
  index.expect_empty();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  internal::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = internal::read_file(path);
  return decode_checkpoint(bytes);
}

void save_classifier(const LinearClassifier& clf, const FeatureKind& kind,
                     const std::filesystem::path& path) {
  Container c;
  c.config = {
      {"artifact", "classifier"},
      {"classifier.kind", std::string(classifier_kind_name(clf.kind))},
      {"classifier.feature", kind.name()},
      {"classifier.lr", format_double(clf.config.lr)},
      {"classifier.max_epochs", std::to_string(clf.config.max_epochs)},
      {"classifier.l2", format_double(clf.config.l2)},
      {"classifier.tol", format_double(clf.config.tol)},
      {"classifier.batch_size", std::to_string(clf.config.batch_size)},
      {"classifier.epochs_run", std::to_string(clf.epochs_run)},
  };
  c.tensors.push_back(to_record("clf.W", clf.weights, false));
  c.tensors.push_back(to_record("clf.b", clf.bias, true));
  c.tensors.push_back(to_record("clf.input_mean", clf.input_mean, true));
  c.tensors.push_back(to_record("clf.input_std", clf.input_std, true));
  internal::write_file(path, encode_container(c));
}

std::pair<LinearClassifier, FeatureKind> load_classifier(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = internal::read_file(path);
  const Container c = decode_container(bytes);
  if (require(c, "artifact") != "classifier") throw bad_config("artifact is not classifier");
  LinearClassifier clf;
  FeatureKind kind;
  try {
    clf.kind = parse_classifier_kind(require(c, "classifier.kind"));
    kind = FeatureKind::parse(require(c, "classifier.feature"));
  } catch (const std::invalid_argument& e) {
    throw bad_config(e.what());
  }
  clf.config.lr = get_double(c, "classifier.lr");
  clf.config.max_epochs = get_int(c, "classifier.max_epochs");
  clf.config.l2 = get_double(c, "classifier.l2");
  clf.config.tol = get_double(c, "classifier.tol");
  clf.config.batch_size = get_int(c, "classifier.batch_size");
  clf.epochs_run = get_int(c, "classifier.epochs_run");
  RecordIndex index(c);
  const TensorRecord& w = index.take("clf.W");
  if (w.dims.size() != 2 || w.dims[1] != kNumEmotions) {
    throw FormatError(FormatErrorCode::kShapeMismatch, "clf.W must be d x 4");
  }
  const auto d = static_cast<Eigen::Index>(w.dims[0]);
  clf.weights = Matrix<double>::Zero(d, kNumEmotions);
  from_record(w, clf.weights, false);
  Matrix<double> b = Matrix<double>::Zero(1, kNumEmotions);
  Matrix<double> mean = Matrix<double>::Zero(1, d);
  Matrix<double> std = Matrix<double>::Zero(1, d);
  from_record(index.take("clf.b"), b, true);
  from_record(index.take("clf.input_mean"), mean, true);
  from_record(index.take("clf.input_std"), std, true);
  index.expect_empty();
  clf.bias = b.row(0);
  clf.input_mean = mean.row(0);
  clf.input_std = std.row(0);
  return {clf, kind};
}

}  // namespace fopser
