// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>

#include "qvit/tensor.hpp"

namespace qvit {

inline constexpr int kBitMin = 2;
inline constexpr int kBitMax = 8;
inline constexpr int kNumCandidateBits = kBitMax - kBitMin + 1;  // 7

enum class QuantRole {
  kWeight,
  kActivation,
  kAttentionScore,
  kHeadOutput,
  kQEmbed,
  kKEmbed,
  kVEmbed,
};

const char* role_name(QuantRole role);
QuantRole role_from_name(const std::string& name);

// Post-softmax attention scores live in [0, 1]; everything else (including
// GELU outputs, which have a negative tail) is signed.
bool default_signedness(QuantRole role);

struct QuantLevels {
  long q_min = 0;
  long q_max = 0;
};

// One quantizer's learnables: the float bit-width and the switchable scale
// vector with one entry per candidate bit in {2..8}. `frozen_bit` is set at
// the searching/diving boundary; from then on the bit never moves and the
// bit-width ceases to receive gradients.
struct QuantizerState {
  Tensor b_tilde;   // scalar
  Tensor scales;    // [7], entry k belongs to bit k+2
  bool is_signed = true;
  QuantRole role = QuantRole::kActivation;
  std::optional<int> frozen_bit;
};

QuantizerState make_quantizer(QuantRole role, double b_tilde_init = 8.0);

// round(clamp(b_tilde, 2, 8)), half to even. The surrogate gradient is
// pass-through on the open interval (2, 8) and zero outside.
int discretize_bit(double b_tilde);

QuantLevels levels(int bit, bool is_signed);

int active_bit(const QuantizerState& state);

// scales[active_bit - 2] as a scalar node. Gradient reaches only the
// selected entry; the switch index itself carries none.
Tensor select_scale(Tape& tape, const QuantizerState& state);

// Fake quantization per x_hat = alpha * round(clamp(x / alpha, -q_min, q_max))
// with surrogate gradients:
//   d x_hat / d x      — 1 in range, 0 clipped (STE through round)
//   d x_hat / d alpha  — LSQ rule on the selected entry, scaled by
//                        1/sqrt(numel * q_max)
//   d x_hat / d b      — clip-boundary rule through q_min/q_max, then the
//                        discretize STE; absent when the bit is frozen
Tensor fake_quantize(Tape& tape, const Tensor& x, const QuantizerState& state);

// Argmin of the squared quantization error over a 128-point geometric grid
// of candidate scales. Throws ValueError for empty or all-zero samples
// (callers fall back to 1.0).
double mse_init_scale(std::span<const double> samples, int bit, bool is_signed);

// Fills all 7 entries of the switchable scale vector, one MSE fit per bit.
void mse_init_all_scales(QuantizerState& state, std::span<const double> samples);

}  // namespace qvit
