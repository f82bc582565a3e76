// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qvit/config.hpp"
#include "qvit/quant.hpp"
#include "qvit/tensor.hpp"
#include "qvit/vit.hpp"

namespace qvit {

// Serializable quantizer state: the learnable bit-width, the seven
// per-candidate-bit scales, the freeze marker, and the signedness.
struct QuantizerSnapshot {
  double b_tilde = 8.0;
  std::array<double, kNumCandidateBits> scales{};
  std::optional<int> frozen_bit;
  bool is_signed = true;
  std::string role = "weight";
};

// In-memory checkpoint. Tensor payloads are stored as f32 on disk; taking a
// snapshot already rounds through f32 so the in-memory copy equals what a
// reload produces.
struct Checkpoint {
  Json meta = Json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::map<std::string, QuantizerSnapshot> quantizers;

  const Tensor* find_tensor(const std::string& name) const;
};

// Container layout: magic "QVCK", u32 LE format version, u64 LE header
// length, JSON header, then contiguous little-endian f32 tensor payloads.
// The loader verifies magic, version, and payload length.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Captures model parameters (rounded through f32) and quantizer states.
// `meta` is stored verbatim; callers add epoch, RNG state, and metrics.
Checkpoint snapshot_model(QuantizedViT& model, Json meta);

// Writes checkpoint tensors and quantizer states back into the model.
// Throws ValueError on a name or shape mismatch.
void restore_model(QuantizedViT& model, const Checkpoint& ck);

}  // namespace qvit
