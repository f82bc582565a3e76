// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "qvit/common.hpp"

namespace qvit {

using Json = nlohmann::ordered_json;

// How the model treats its quantizers during forward.
enum class QuantMode { kFloat, kUniform, kLearned };

const char* quant_mode_name(QuantMode mode);
QuantMode quant_mode_from_name(const std::string& name);

// Architecture shape. All derived quantities are recomputed, never stored.
struct ModelConfig {
  long image_size = 32;
  long patch_size = 8;
  long in_channels = 3;
  long embed_dim = 64;  // d
  long depth = 4;       // L
  long heads = 4;       // h
  long mlp_dim = 128;   // d_m
  long num_classes = 10;
  QuantMode quant_mode = QuantMode::kFloat;
  int uniform_bits = 8;   // active bit-width in kUniform mode
  bool pre_norm = false;  // false: LayerNorm applied after each residual add

  long head_dim() const { return embed_dim / heads; }
  long grid() const { return image_size / patch_size; }
  long num_patches() const { return grid() * grid(); }
  long tokens() const { return num_patches() + 1; }  // +1 class token
  long patch_dim() const { return in_channels * patch_size * patch_size; }

  // Throws ConfigError on an inconsistent shape.
  void validate() const;
};

// Named presets: "toy", "deit-t", "deit-s". Throws ConfigError otherwise.
ModelConfig arch_preset(const std::string& name);

// Training-loop knobs. Defaults target the minutes-scale toy runs.
struct TrainConfig {
  int constraint_bits = 4;  // N: the uniform-N-bit BitOPs budget
  double eta = 0.1;         // penalty strength
  double sigma = 0.9;       // searching-stage fraction of epochs
  long epochs = 60;
  long batch_size = 64;
  double lr_weights = 1e-3;
  double lr_quant = 1e-2;  // bit-widths and scales
  std::uint64_t seed = 7;
  double weight_decay = 0.05;  // decoupled; weights only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  long calibration_batches = 1;  // activation-scale calibration

  void validate() const;
};

// Dataset source: seeded synthetic generator or IDX file pairs.
struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" | "idx"
  long train_count = 512;
  long eval_count = 256;
  double noise_sigma = 0.3;
  std::uint64_t seed = 1;
  std::string train_images;
  std::string train_labels;
  std::string eval_images;
  std::string eval_labels;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

// Strict parsers: unknown keys are rejected with ConfigError naming the key.
ModelConfig parse_model_config(const Json& j);
TrainConfig parse_train_config(const Json& j);
DataConfig parse_data_config(const Json& j);
RunConfig parse_run_config(const Json& j);

// Reads and parses a JSON run config. IoError on unreadable file,
// ConfigError on malformed JSON or schema violations.
RunConfig load_run_config(const std::string& path);

Json model_config_to_json(const ModelConfig& cfg);
Json train_config_to_json(const TrainConfig& cfg);
Json data_config_to_json(const DataConfig& cfg);
Json run_config_to_json(const RunConfig& cfg);

}  // namespace qvit
