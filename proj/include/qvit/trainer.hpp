// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qvit/checkpoint.hpp"
#include "qvit/config.hpp"
#include "qvit/data.hpp"
#include "qvit/vit.hpp"

namespace qvit {

// Decoupled-weight-decay adaptive optimizer over the model's float
// parameters. Decay applies to weight matrices only; biases, norm
// parameters, the class token, and the positional embedding are exempt.
class AdamW {
 public:
  AdamW(const TrainConfig& tc,
        const std::vector<std::pair<std::string, Tensor>>& params);

  // One update at the given learning rate; parameters without gradients are
  // skipped. Gradients are left untouched (callers zero them afterwards).
  void step(double lr);

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
    bool decay = false;
  };
  std::vector<Slot> slots_;
  double weight_decay_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

// Half-cosine decay from `base` to zero across `total` steps, no warm-up.
double cosine_lr(double base, long step, long total);

struct DataBundle {
  Dataset train;
  Dataset eval;
};

// Synthetic: one generator run of train_count + eval_count samples split
// head/tail, so both splits share class templates. IDX: loads both pairs and
// checks that shapes match the model. Throws ConfigError on a mismatch.
DataBundle load_data(const DataConfig& dc, const ModelConfig& mc);

// Top-1 accuracy, deterministic, no parameter mutation.
double evaluate(QuantizedViT& model, const Dataset& ds, long batch_size);

// MSE-initializes all seven scale entries of every quantizer: weight
// quantizers from their weight tensors, activation quantizers from
// activations captured on the leading calibration batches (model run in
// float mode during capture). Deterministic given model state and data.
void calibrate_all_scales(QuantizedViT& model, const Dataset& calib,
                          long batch_size, long calib_batches);

// QAT starting point per the two-stage recipe: weights from the float
// checkpoint; interior bit-widths at N+1; patch-embed and classifier
// quantizers at 8 (still learnable); no bit frozen; scales MSE-initialized.
void init_qat(QuantizedViT& model, const Checkpoint& float_ckpt,
              const TrainConfig& tc, const Dataset& calib);

// Restores the checkpoint, freezes every quantizer at `bit`, and calibrates
// scales — the fixed-precision baseline the sensitivity probes start from.
void prepare_frozen_uniform(QuantizedViT& model, const Checkpoint& ckpt,
                            int bit, const Dataset& calib, long batch_size,
                            long calib_batches);

struct TrainArtifacts {
  std::string checkpoint_path;
  std::string metrics_path;
  double final_train_acc = 0.0;
  double final_eval_acc = 0.0;
  double final_gbitops = 0.0;
  double budget_gbitops = 0.0;
};

// Float pretraining. Writes metrics.jsonl and float.qvck into out_dir; the
// checkpoint's logged accuracies are measured after rounding weights
// through f32, so reloading reproduces them exactly.
TrainArtifacts pretrain_float(const RunConfig& cfg, const std::string& out_dir);

// Two-stage QAT: epochs before round(sigma * epochs) form the searching
// stage (task loss + budget penalty; weights, scales, and bit-widths all
// move); at the boundary every bit-width freezes to its discretized value;
// the diving stage then trains weights and active scales under task loss
// only. Writes metrics.jsonl, per-epoch allocation CSVs, and qat.qvck.
TrainArtifacts train_qat(const RunConfig& cfg,
                         const std::string& float_ckpt_path,
                         const std::string& out_dir);

// Accuracy drop per head when one head of `layer` is forced to probe_bit
// (its five embedding quantizers and four weight quantizers), evaluated
// against the model's current baseline. Restores all state afterwards.
std::vector<double> probe_head_sensitivity(QuantizedViT& model,
                                           const Dataset& eval_ds,
                                           long batch_size, size_t layer,
                                           int probe_bit = 2);

// Accuracy with, in turn, only GELU outputs, only the fully-connected
// quantizers, then both forced to probe_bit across every MLP, next to the
// float and all-baseline rows. Restores all state afterwards.
std::vector<std::pair<std::string, double>> probe_mlp_components(
    QuantizedViT& model, const Dataset& eval_ds, long batch_size,
    int probe_bit = 2);

// Allocation snapshot CSV (name,layer,head,role,bit) and the per-layer
// per-role summary (layer,role,min,median,max,mean over head-owned bits).
std::string allocation_csv(const QuantizedViT& model);
std::string allocation_summary_csv(const QuantizedViT& model);

}  // namespace qvit
