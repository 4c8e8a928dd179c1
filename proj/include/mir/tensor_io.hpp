// SPDX-License-Identifier: Apache-2.0
//
// Activation tensors on disk (NPY v1.0, <f4, C order, 2-D) and the JSON run
// manifest that binds one tensor pair per layer.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace mir {

/// Token matrix as stored on disk: rows are tokens, columns hidden dims.
using Tensor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TensorShape {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
};

struct LayerEntry {
  int index = 0;
  std::string vision;  // as written in the manifest, relative to its directory
  std::string text;
};

struct RunManifest {
  std::string model_id;
  int hidden_dim = 0;
  int num_layers = 0;
  int num_pairs = 0;
  std::vector<LayerEntry> layers;
  /// Keys not part of the schema, kept verbatim and written back out.
  nlohmann::json extra = nlohmann::json::object();
  /// Directory the relative tensor paths are resolved against.
  std::filesystem::path root;

  std::filesystem::path resolve(const std::string& rel) const;
};

struct LayerActivations {
  Tensor vision;
  Tensor text;
  int layer_index = 0;
};

Tensor read_tensor(const std::filesystem::path& path);

/// Parses only the NPY header.
TensorShape read_tensor_shape(const std::filesystem::path& path);

void write_tensor(const Tensor& matrix, const std::filesystem::path& path);

/// Exact header bytes (magic through the terminating newline) for a shape.
std::string npy_header(TensorShape shape);

/// Reads and eagerly validates a manifest, including every tensor header.
RunManifest read_manifest(const std::filesystem::path& path);

/// Checks the structural invariants of an in-memory manifest without
/// touching the filesystem.
void validate_manifest_structure(const RunManifest& manifest);

nlohmann::json manifest_to_json(const RunManifest& manifest);

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

/// Loads one layer's tensor pair, rejecting non-finite values.
LayerActivations load_layer(const RunManifest& manifest, const LayerEntry& entry);

}  // namespace mir
