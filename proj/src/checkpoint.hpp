// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include "adapter.hpp"
#include "model.hpp"

namespace d2lora {

// Layer checkpoint ("D2LA"):
//   "D2LA" | u32 version (=1) | u32 header length | header JSON (UTF-8)
//   | f64 arrays, little-endian, in the order listed by header.arrays
//
// header = {"kind": "adapter" | "merged" | "linear", "merged": bool,
//           "d_out", "d_in", "config": {...} (absent for linear),
//           "arrays": [{"name", "rows", "cols"}, ...]}
//
// adapter arrays: W0, b, m, A_plus, B_plus, A_minus, B_minus, tau
// merged arrays:  W_hat, b
// linear arrays:  W, b
//
// Net checkpoint ("D2LN"):
//   "D2LN" | u32 version (=1) | u32 manifest length | manifest JSON
//   | concatenated layer checkpoints
//
// manifest = {"embed_dim", "n_classes", "seq_len", "activation",
//             "modules": [{"name", "kind", "offset", "length"}, ...]}
// with offsets relative to the first byte after the manifest.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind { adapter, merged, linear };

struct LayerRecord {
  CheckpointKind kind = CheckpointKind::linear;
  AdapterConfig config;  // adapter and merged only
  Matrix weight;         // W0, W_hat or W
  Vector bias;
  Vector magnitudes;  // adapter only
  AdapterFactors factors;
};

/// Adapter checkpoint when unmerged, merged checkpoint (W_hat only) when merged.
std::string encode_layer(const AdapterLayer& layer);
std::string encode_linear(const Matrix& weight, const Vector& bias);
/// Throws FormatError on bad magic, unknown version, truncation or trailing bytes.
LayerRecord decode_layer(std::string_view bytes);
/// Rebuilds the adapter layer; throws StateError for merged/linear records.
AdapterLayer layer_from_record(LayerRecord record);
/// Adapter records keep their adapter; merged and linear records become
/// plain affine modules.
LinearModule module_from_record(std::string name, LayerRecord record);

std::string encode_net(const ToyNet& net);
ToyNet decode_net(std::string_view bytes);

/// Writes to path + ".tmp" then renames over path.
void write_file_atomic(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

/// "D2LA" or "D2LN" for a checkpoint file, empty otherwise.
std::string sniff_magic(std::string_view bytes);

}  // namespace d2lora
