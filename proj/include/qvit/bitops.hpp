// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qvit/config.hpp"
#include "qvit/quant.hpp"
#include "qvit/tensor.hpp"

namespace qvit {

// Per-quantizer discrete bit map, keyed by canonical quantizer name.
using BitAllocation = std::map<std::string, int>;

// One counted matmul: `quant_a` names the quantizer on the activation (or
// first) operand, `quant_b` the one on the weight (or second) operand.
struct MatmulEntry {
  std::string name;
  double macs = 0.0;
  std::string quant_a;
  std::string quant_b;
};

// Every matmul the complexity model counts, in a fixed deterministic order:
// patch embed; per block and per head the three projections, the
// query-key product, the score-value product, and the head output
// projection; per block the two MLP layers; the classifier. Softmax,
// LayerNorm, residual adds, and bias adds are excluded.
std::vector<MatmulEntry> enumerate_matmuls(const ModelConfig& cfg);

// Canonical quantizer names for `cfg`, in first-use order over the matmul
// enumeration. Every quantizer in the model feeds exactly one operand side.
std::vector<std::string> quantizer_names(const ModelConfig& cfg);

// BitOPs of a single matmul: macs * bits_a * bits_b. Bits may be fractional
// (the continuous relaxation used while bit-widths are being searched).
double matmul_bitops(double macs, double bits_a, double bits_b);

struct BitOpsEntry {
  std::string name;
  double macs = 0.0;
  std::string quant_a;
  double bits_a = 0.0;
  std::string quant_b;
  double bits_b = 0.0;
  double bitops = 0.0;
};

struct BitOpsReport {
  std::vector<BitOpsEntry> entries;
  double total_bitops = 0.0;    // sum of entry bitops
  double total_gbitops = 0.0;   // total_bitops / 1e9
  std::optional<double> budget_gbitops;  // c, when a constraint is in play
  bool over_budget = false;

  Json to_json() const;
  // Columns: name,macs,quant_a,bits_a,quant_b,bits_b,bitops
  std::string to_csv() const;
};

// Whole-model BitOPs under a per-quantizer bit map. With continuous=false
// each value is discretized (round-half-even of clamp to [2,8]); with
// continuous=true the clamped fractional value is used directly.
// Throws ValueError when a matmul references a name missing from `bits`.
BitOpsReport model_bitops(const ModelConfig& cfg,
                          const std::map<std::string, double>& bits,
                          bool continuous = false);
BitOpsReport model_bitops(const ModelConfig& cfg, const BitAllocation& alloc);

// Allocation with every quantizer at N bits except the patch-embed and
// classifier pairs, which sit at 8.
BitAllocation uniform_allocation(const ModelConfig& cfg, int n_bits);

// The budget c in GBitOPs: model BitOPs under uniform_allocation(cfg, N).
double uniform_budget(const ModelConfig& cfg, int n_bits);

// Differentiable total BitOPs in GBitOPs as a tape expression:
// sum over matmuls of macs * clamp(b_a, 2, 8) * clamp(b_b, 2, 8) / 1e9,
// where b_* are the scalar learnable bit-width tensors keyed by quantizer
// name. The clamp passes gradient on the closed interval so bit-widths
// sitting exactly on a boundary still feel the budget.
Tensor continuous_bitops(Tape& tape, const ModelConfig& cfg,
                         const std::map<std::string, Tensor>& b_tilde);

// eta * hinge(C - c)^2 with hinge(z) = max(z, 0); gradient w.r.t. C is
// 2*eta*(C - c) over budget and exactly zero at or under it. C and c are
// both in GBitOPs.
Tensor penalty(Tape& tape, const Tensor& continuous_gbitops, double budget,
               double eta);

}  // namespace qvit
