// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qvit/bitops.hpp"
#include "qvit/config.hpp"
#include "qvit/quant.hpp"
#include "qvit/rng.hpp"
#include "qvit/tensor.hpp"

namespace qvit {

// Rearranges one image (flat CHW, [C*H*W]) into the patch matrix
// [num_patches x in_channels*patch*patch]. Row r is patch (r / grid,
// r % grid); within a row, elements run channel-major then row-major
// inside the patch. Pure data movement, no gradient.
Tensor patchify(const ModelConfig& cfg, const Tensor& image);

// Per-head attention weights: projections [d x d_h], output slice [d_h x d],
// plus the head's own weight and embedding quantizers.
struct MsaHead {
  Tensor w_q, w_k, w_v;  // [d x d_h]
  Tensor b_q, b_k, b_v;  // [d_h]
  Tensor w_o;            // [d_h x d]
  QuantizerState qw_q, qw_k, qw_v, qw_o;
  QuantizerState q_q, q_k, q_v, q_attn, q_out;
};

struct Msa {
  QuantizerState x_in;  // shared input quantizer feeding every projection
  std::vector<MsaHead> heads;
  Tensor b_o;  // [d], added once after the per-head sum
};

struct Mlp {
  QuantizerState x_in;
  Tensor w1;  // [d x d_m]
  Tensor b1;  // [d_m]
  QuantizerState qw1;
  QuantizerState gelu_out;
  Tensor w2;  // [d_m x d]
  Tensor b2;  // [d]
  QuantizerState qw2;
};

struct Block {
  Msa msa;
  Mlp mlp;
  Tensor ln1_gamma, ln1_beta;  // [d]
  Tensor ln2_gamma, ln2_beta;  // [d]
};

// Observes the tensor entering each activation quantizer (weights excluded),
// keyed by quantizer name. Used to gather scale-calibration samples.
using ActivationHook =
    std::function<void(const std::string& name, const Tensor& pre_quant)>;

// Vision transformer with quantizers at every counted matmul operand.
// quant_mode float bypasses quantization entirely; uniform freezes every
// quantizer at uniform_bits on construction; learned runs live bit-widths.
class QuantizedViT {
 public:
  QuantizedViT(ModelConfig cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  void set_quant_mode(QuantMode mode) { cfg_.quant_mode = mode; }

  // Logits [1 x num_classes] for one flat CHW image.
  Tensor forward(Tape& tape, const Tensor& image);
  // Logits [B x num_classes]; row b is forward(images[b]).
  Tensor forward_batch(Tape& tape, const std::vector<Tensor>& images);

  // One transformer block over token embeddings [n x d].
  Tensor forward_block(Tape& tape, const Tensor& x, size_t block_index);
  Tensor forward_msa(Tape& tape, const Tensor& x, size_t block_index);
  Tensor forward_mlp(Tape& tape, const Tensor& x, size_t block_index);

  // Trainable float parameters (weights, biases, norms, class token,
  // positional embedding) in a fixed order, with stable names.
  std::vector<std::pair<std::string, Tensor>> parameters();

  // Every quantizer in canonical order (pipeline order; documented in the
  // README). Names match the complexity model's enumeration exactly.
  std::vector<std::pair<std::string, QuantizerState*>> quantizers();
  std::vector<std::pair<std::string, const QuantizerState*>> quantizers()
      const;

  // Discrete bit per quantizer. set_allocation freezes frozen_bit on every
  // quantizer and requires complete coverage; round-trips exactly.
  BitAllocation get_allocation() const;
  void set_allocation(const BitAllocation& alloc);

  // For each weight quantizer, the weight tensor it quantizes. Scale
  // calibration for weights reads the full tensor through this map.
  std::map<std::string, Tensor> weight_tensor_by_quantizer();

  void set_activation_hook(ActivationHook hook) { hook_ = std::move(hook); }

  // FNV-1a over every parameter element and quantizer state. Detects any
  // mutation, e.g. by a probe that failed to restore.
  std::uint64_t state_hash() const;

  static size_t expected_quantizer_count(const ModelConfig& cfg);

 private:
  Tensor quantize_act(Tape& tape, const Tensor& x, const std::string& name,
                      QuantizerState& q);
  Tensor quantize_weight(Tape& tape, const Tensor& w, QuantizerState& q);

  ModelConfig cfg_;
  Tensor cls_token_;  // [1 x d]
  Tensor pos_embed_;  // [n x d]
  Tensor patch_w_;    // [patch_dim x d]
  Tensor patch_b_;    // [d]
  QuantizerState patch_qx_, patch_qw_;
  std::vector<Block> blocks_;
  Tensor ln_f_gamma_, ln_f_beta_;  // [d]
  Tensor cls_w_;                   // [d x num_classes]
  Tensor cls_b_;                   // [num_classes]
  QuantizerState cls_qx_, cls_qw_;
  ActivationHook hook_;
};

}  // namespace qvit
