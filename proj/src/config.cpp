// SPDX-License-Identifier: Apache-2.0
#include "qvit/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace qvit {

namespace {

// Rejects any key in `j` that is not in `allowed`.
void check_keys(const Json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object())
    throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key()))
      throw ConfigError(where + ": unknown key \"" + item.key() + "\"");
  }
}

long get_long(const Json& j, const std::string& key, long fallback) {
  if (!j.contains(key)) return fallback;
  const Json& v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError("\"" + key + "\" must be an integer");
  return v.get<long>();
}

double get_double(const Json& j, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  const Json& v = j.at(key);
  if (!v.is_number())
    throw ConfigError("\"" + key + "\" must be a number");
  return v.get<double>();
}

std::string get_string(const Json& j, const std::string& key,
                       const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const Json& v = j.at(key);
  if (!v.is_string())
    throw ConfigError("\"" + key + "\" must be a string");
  return v.get<std::string>();
}

bool get_bool(const Json& j, const std::string& key, bool fallback) {
  if (!j.contains(key)) return fallback;
  const Json& v = j.at(key);
  if (!v.is_boolean())
    throw ConfigError("\"" + key + "\" must be a boolean");
  return v.get<bool>();
}

std::uint64_t get_u64(const Json& j, const std::string& key,
                      std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const Json& v = j.at(key);
  if (!v.is_number_integer() ||
      (!v.is_number_unsigned() && v.get<long long>() < 0))
    throw ConfigError("\"" + key + "\" must be a non-negative integer");
  return v.get<std::uint64_t>();
}

}  // namespace

const char* quant_mode_name(QuantMode mode) {
  switch (mode) {
    case QuantMode::kFloat: return "float";
    case QuantMode::kUniform: return "uniform";
    case QuantMode::kLearned: return "learned";
  }
  return "unknown";
}

QuantMode quant_mode_from_name(const std::string& name) {
  if (name == "float") return QuantMode::kFloat;
  if (name == "uniform") return QuantMode::kUniform;
  if (name == "learned") return QuantMode::kLearned;
  throw ConfigError("unknown quant_mode \"" + name +
                    "\" (expected float | uniform | learned)");
}

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || in_channels <= 0 ||
      embed_dim <= 0 || depth <= 0 || heads <= 0 || mlp_dim <= 0 ||
      num_classes <= 0)
    throw ConfigError("model dimensions must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("image_size must be divisible by patch_size");
  if (embed_dim % heads != 0)
    throw ConfigError("embed_dim must be divisible by heads");
  if (uniform_bits < 2 || uniform_bits > 8)
    throw ConfigError("uniform_bits must lie in [2, 8]");
}

ModelConfig arch_preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "toy") {
    // Defaults already describe the toy model.
  } else if (name == "deit-t") {
    cfg.image_size = 224;
    cfg.patch_size = 16;
    cfg.in_channels = 3;
    cfg.embed_dim = 192;
    cfg.depth = 12;
    cfg.heads = 3;
    cfg.mlp_dim = 768;
    cfg.num_classes = 1000;
  } else if (name == "deit-s") {
    cfg.image_size = 224;
    cfg.patch_size = 16;
    cfg.in_channels = 3;
    cfg.embed_dim = 384;
    cfg.depth = 12;
    cfg.heads = 6;
    cfg.mlp_dim = 1536;
    cfg.num_classes = 1000;
  } else {
    throw ConfigError("unknown arch preset \"" + name +
                      "\" (expected toy | deit-t | deit-s)");
  }
  return cfg;
}

void TrainConfig::validate() const {
  if (constraint_bits < 2 || constraint_bits > 8)
    throw ConfigError("constraint_bits must lie in [2, 8]");
  if (eta < 0.0) throw ConfigError("eta must be >= 0");
  if (sigma < 0.0 || sigma > 1.0)
    throw ConfigError("sigma must lie in [0, 1]");
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (lr_weights <= 0.0 || lr_quant <= 0.0)
    throw ConfigError("learning rates must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
  if (calibration_batches <= 0)
    throw ConfigError("calibration_batches must be positive");
}

void DataConfig::validate() const {
  if (kind == "synthetic") {
    if (train_count <= 0 || eval_count <= 0)
      throw ConfigError("synthetic data counts must be positive");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  } else if (kind == "idx") {
    if (train_images.empty() || train_labels.empty())
      throw ConfigError("idx data requires train_images and train_labels");
    if (eval_images.empty() || eval_labels.empty())
      throw ConfigError("idx data requires eval_images and eval_labels");
  } else {
    throw ConfigError("unknown data kind \"" + kind +
                      "\" (expected synthetic | idx)");
  }
}

ModelConfig parse_model_config(const Json& j) {
  check_keys(j,
             {"arch", "image_size", "patch_size", "in_channels", "embed_dim",
              "depth", "heads", "mlp_dim", "num_classes", "quant_mode",
              "uniform_bits", "pre_norm"},
             "model");
  ModelConfig cfg =
      j.contains("arch") ? arch_preset(get_string(j, "arch", "toy"))
                         : ModelConfig{};
  cfg.image_size = get_long(j, "image_size", cfg.image_size);
  cfg.patch_size = get_long(j, "patch_size", cfg.patch_size);
  cfg.in_channels = get_long(j, "in_channels", cfg.in_channels);
  cfg.embed_dim = get_long(j, "embed_dim", cfg.embed_dim);
  cfg.depth = get_long(j, "depth", cfg.depth);
  cfg.heads = get_long(j, "heads", cfg.heads);
  cfg.mlp_dim = get_long(j, "mlp_dim", cfg.mlp_dim);
  cfg.num_classes = get_long(j, "num_classes", cfg.num_classes);
  cfg.quant_mode = quant_mode_from_name(
      get_string(j, "quant_mode", quant_mode_name(cfg.quant_mode)));
  cfg.uniform_bits =
      static_cast<int>(get_long(j, "uniform_bits", cfg.uniform_bits));
  cfg.pre_norm = get_bool(j, "pre_norm", cfg.pre_norm);
  cfg.validate();
  return cfg;
}

TrainConfig parse_train_config(const Json& j) {
  check_keys(j,
             {"constraint_bits", "eta", "sigma", "epochs", "batch_size",
              "lr_weights", "lr_quant", "seed", "weight_decay", "beta1",
              "beta2", "adam_eps", "calibration_batches"},
             "train");
  TrainConfig cfg;
  cfg.constraint_bits =
      static_cast<int>(get_long(j, "constraint_bits", cfg.constraint_bits));
  cfg.eta = get_double(j, "eta", cfg.eta);
  cfg.sigma = get_double(j, "sigma", cfg.sigma);
  cfg.epochs = get_long(j, "epochs", cfg.epochs);
  cfg.batch_size = get_long(j, "batch_size", cfg.batch_size);
  cfg.lr_weights = get_double(j, "lr_weights", cfg.lr_weights);
  cfg.lr_quant = get_double(j, "lr_quant", cfg.lr_quant);
  cfg.seed = get_u64(j, "seed", cfg.seed);
  cfg.weight_decay = get_double(j, "weight_decay", cfg.weight_decay);
  cfg.beta1 = get_double(j, "beta1", cfg.beta1);
  cfg.beta2 = get_double(j, "beta2", cfg.beta2);
  cfg.adam_eps = get_double(j, "adam_eps", cfg.adam_eps);
  cfg.calibration_batches =
      get_long(j, "calibration_batches", cfg.calibration_batches);
  cfg.validate();
  return cfg;
}

DataConfig parse_data_config(const Json& j) {
  check_keys(j,
             {"kind", "train_count", "eval_count", "noise_sigma", "seed",
              "train_images", "train_labels", "eval_images", "eval_labels"},
             "data");
  DataConfig cfg;
  cfg.kind = get_string(j, "kind", cfg.kind);
  cfg.train_count = get_long(j, "train_count", cfg.train_count);
  cfg.eval_count = get_long(j, "eval_count", cfg.eval_count);
  cfg.noise_sigma = get_double(j, "noise_sigma", cfg.noise_sigma);
  cfg.seed = get_u64(j, "seed", cfg.seed);
  cfg.train_images = get_string(j, "train_images", cfg.train_images);
  cfg.train_labels = get_string(j, "train_labels", cfg.train_labels);
  cfg.eval_images = get_string(j, "eval_images", cfg.eval_images);
  cfg.eval_labels = get_string(j, "eval_labels", cfg.eval_labels);
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config(const Json& j) {
  check_keys(j, {"model", "train", "data"}, "config");
  RunConfig cfg;
  if (j.contains("model")) cfg.model = parse_model_config(j.at("model"));
  if (j.contains("train")) cfg.train = parse_train_config(j.at("train"));
  if (j.contains("data")) cfg.data = parse_data_config(j.at("data"));
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file: " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

Json model_config_to_json(const ModelConfig& cfg) {
  Json j;
  j["image_size"] = cfg.image_size;
  j["patch_size"] = cfg.patch_size;
  j["in_channels"] = cfg.in_channels;
  j["embed_dim"] = cfg.embed_dim;
  j["depth"] = cfg.depth;
  j["heads"] = cfg.heads;
  j["mlp_dim"] = cfg.mlp_dim;
  j["num_classes"] = cfg.num_classes;
  j["quant_mode"] = quant_mode_name(cfg.quant_mode);
  j["uniform_bits"] = cfg.uniform_bits;
  j["pre_norm"] = cfg.pre_norm;
  return j;
}

Json train_config_to_json(const TrainConfig& cfg) {
  Json j;
  j["constraint_bits"] = cfg.constraint_bits;
  j["eta"] = cfg.eta;
  j["sigma"] = cfg.sigma;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr_weights"] = cfg.lr_weights;
  j["lr_quant"] = cfg.lr_quant;
  j["seed"] = cfg.seed;
  j["weight_decay"] = cfg.weight_decay;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["calibration_batches"] = cfg.calibration_batches;
  return j;
}

Json data_config_to_json(const DataConfig& cfg) {
  Json j;
  j["kind"] = cfg.kind;
  if (cfg.kind == "synthetic") {
    j["train_count"] = cfg.train_count;
    j["eval_count"] = cfg.eval_count;
    j["noise_sigma"] = cfg.noise_sigma;
    j["seed"] = cfg.seed;
  } else {
    j["train_images"] = cfg.train_images;
    j["train_labels"] = cfg.train_labels;
    j["eval_images"] = cfg.eval_images;
    j["eval_labels"] = cfg.eval_labels;
  }
  return j;
}

Json run_config_to_json(const RunConfig& cfg) {
  Json j;
  j["model"] = model_config_to_json(cfg.model);
  j["train"] = train_config_to_json(cfg.train);
  j["data"] = data_config_to_json(cfg.data);
  return j;
}

}  // namespace qvit
