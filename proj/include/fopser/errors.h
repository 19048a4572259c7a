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

#ifndef FOPSER_ERRORS_H_
#define FOPSER_ERRORS_H_

#include <stdexcept>
#include <string>
#include <string_view>

namespace fopser {

// Reasons a persisted file (WAV, feature file, checkpoint) is rejected.
enum class FormatErrorCode {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kUnsupported,
  kTruncated,
  kCrcMismatch,
  kShapeMismatch,
  kTrailingData,
  kBadConfig,
};

std::string_view format_error_name(FormatErrorCode code);

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  FormatErrorCode code() const { return code_; }

 private:
  FormatErrorCode code_;
};

}  // namespace fopser

#endif  // FOPSER_ERRORS_H_
