// SPDX-License-Identifier: Apache-2.0
#include "mir/error.hpp"

namespace mir {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedManifest: return "MalformedManifest";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::UnsupportedLayout: return "UnsupportedLayout";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::NotSymmetric: return "NotSymmetric";
    case ErrorCode::EigenFailure: return "EigenFailure";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::InternalConsistency: return "InternalConsistency";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::Divergence: return "Divergence";
  }
  return "Unknown";
}

bool is_numerical(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotSymmetric:
    case ErrorCode::EigenFailure:
    case ErrorCode::NonConvergence:
    case ErrorCode::InternalConsistency:
    case ErrorCode::Divergence:
      return true;
    default:
      return false;
  }
}

Error::Error(ErrorCode code, std::string message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code),
      detail_(std::move(message)) {}

Error Error::with_layer(int layer) const {
  if (layer_) return *this;
  Error tagged(code_, "layer " + std::to_string(layer) + ": " + detail_);
  tagged.detail_ = detail_;
  tagged.layer_ = layer;
  return tagged;
}

}  // namespace mir
