// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mir {

enum class ErrorCode {
  // tensor_io
  MalformedManifest,
  ShapeMismatch,
  MissingFile,
  BadMagic,
  UnsupportedDtype,
  UnsupportedLayout,
  BadHeader,
  NonFiniteValue,
  IoFailure,
  InvalidArgument,
  // gapstats
  DegenerateInput,
  InsufficientSamples,
  // matsqrt
  NotSymmetric,
  EigenFailure,
  NonConvergence,
  // mir_core
  InternalConsistency,
  // moca
  DimensionMismatch,
  Divergence,
};

std::string_view to_string(ErrorCode code);

/// True for failures caused by the numerics rather than by the input data.
bool is_numerical(ErrorCode code);

/// Single exception type for the library. Every failure carries a code, and
/// errors raised while processing a specific layer carry its index.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message);

  ErrorCode code() const noexcept { return code_; }
  std::optional<int> layer() const noexcept { return layer_; }
  const std::string& detail() const noexcept { return detail_; }

  /// Copy of this error tagged with a layer index (first tag wins).
  Error with_layer(int layer) const;

 private:
  ErrorCode code_;
  std::string detail_;
  std::optional<int> layer_;
};

}  // namespace mir
