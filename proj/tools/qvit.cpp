// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: pretraining, two-stage quantization-aware
// training, evaluation, sensitivity probes, and complexity reports.
//
// Exit codes: 0 success, 64 usage error, 65 malformed config or data file,
// 66 unreadable input file, 70 internal error, 73 run directory locked.
#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "fmt/format.h"
#include "qvit/bitops.hpp"
#include "qvit/checkpoint.hpp"
#include "qvit/config.hpp"
#include "qvit/data.hpp"
#include "qvit/trainer.hpp"
#include "qvit/vit.hpp"

namespace {

using namespace qvit;

constexpr int kExitUsage = 64;
constexpr int kExitDataErr = 65;
constexpr int kExitNoInput = 66;
constexpr int kExitInternal = 70;
constexpr int kExitLocked = 73;

struct LockedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exclusive run-directory marker; removed on scope exit.
class RunLock {
 public:
  explicit RunLock(const std::string& dir) : path_(dir + "/run.lock") {
    std::filesystem::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw LockedError("run directory is locked by another writer: " + dir);
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

ModelConfig arch_from_flag(const std::string& arch) {
  if (arch == "toy" || arch == "deit-t" || arch == "deit-s")
    return arch_preset(arch);
  // Anything else is a path to a JSON file holding a model object.
  std::ifstream in(arch, std::ios::binary);
  if (!in) throw IoError("cannot read model config file: " + arch);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") +
                      e.what());
  }
  return parse_model_config(j.contains("model") ? j.at("model") : j);
}

BitAllocation allocation_from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read allocation CSV: " + path);
  BitAllocation alloc;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.starts_with("name,")) continue;  // header
    }
    const size_t first_comma = line.find(',');
    const size_t last_comma = line.rfind(',');
    if (first_comma == std::string::npos || last_comma == first_comma)
      throw FormatError("allocation CSV line needs name,...,bit: " + line);
    const std::string name = line.substr(0, first_comma);
    int bit = 0;
    try {
      bit = std::stoi(line.substr(last_comma + 1));
    } catch (const std::exception&) {
      throw FormatError("allocation CSV has a non-integer bit: " + line);
    }
    alloc[name] = bit;
  }
  if (alloc.empty()) throw FormatError("allocation CSV is empty: " + path);
  return alloc;
}

// Rebuilds the model recorded in a checkpoint and restores its state.
struct LoadedModel {
  RunConfig cfg;
  QuantizedViT model;
};

LoadedModel model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("config"))
    throw FormatError("checkpoint lacks an embedded config");
  RunConfig cfg = parse_run_config(ck.meta.at("config"));
  Rng rng(cfg.train.seed);
  // The embedded config records the quant mode the run actually used, so the
  // rebuilt model evaluates exactly as it did when the accuracy was logged.
  LoadedModel lm{cfg, QuantizedViT(cfg.model, rng)};
  restore_model(lm.model, ck);
  return lm;
}

int run(int argc, char** argv) {
  CLI::App app{"Mixed-precision vision-transformer training laboratory"};
  app.require_subcommand(1);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Float pretraining");
  std::string pre_config, pre_out;
  pre->add_option("--config", pre_config, "Run config JSON")->required();
  pre->add_option("--out", pre_out, "Output run directory")->required();
  pre->callback([&] {
    RunConfig cfg = load_run_config(pre_config);
    RunLock lock(pre_out);
    TrainArtifacts art = pretrain_float(cfg, pre_out);
    Json out;
    out["checkpoint"] = art.checkpoint_path;
    out["metrics"] = art.metrics_path;
    out["train_acc"] = art.final_train_acc;
    out["eval_acc"] = art.final_eval_acc;
    std::cout << out.dump() << "\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "Two-stage quantization-aware training");
  std::string tr_config, tr_init, tr_out;
  tr->add_option("--config", tr_config, "Run config JSON")->required();
  tr->add_option("--init", tr_init, "Float checkpoint to start from")
      ->required();
  tr->add_option("--out", tr_out, "Output run directory")->required();
  tr->callback([&] {
    RunConfig cfg = load_run_config(tr_config);
    RunLock lock(tr_out);
    TrainArtifacts art = train_qat(cfg, tr_init, tr_out);
    Json out;
    out["checkpoint"] = art.checkpoint_path;
    out["metrics"] = art.metrics_path;
    out["train_acc"] = art.final_train_acc;
    out["eval_acc"] = art.final_eval_acc;
    out["gbitops"] = art.final_gbitops;
    out["budget_gbitops"] = art.budget_gbitops;
    std::cout << out.dump() << "\n";
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  std::string ev_ckpt, ev_data;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data,
                 "Data config JSON (default: the checkpoint's)");
  ev->callback([&] {
    Checkpoint ck = load_checkpoint(ev_ckpt);
    LoadedModel lm = model_from_checkpoint(ck);
    if (!ev_data.empty()) {
      std::ifstream in(ev_data, std::ios::binary);
      if (!in) throw IoError("cannot read data config: " + ev_data);
      Json j;
      try {
        j = Json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("data config is not valid JSON: ") +
                          e.what());
      }
      lm.cfg.data = parse_data_config(j.contains("data") ? j.at("data") : j);
    }
    DataBundle data = load_data(lm.cfg.data, lm.cfg.model);
    const double top1 =
        evaluate(lm.model, data.eval, lm.cfg.train.batch_size);
    Json out;
    out["top1"] = top1;
    if (ck.meta.contains("eval_acc"))
      out["logged_eval_acc"] = ck.meta.at("eval_acc");
    std::cout << out.dump() << "\n";
  });

  // probe-heads
  auto* ph = app.add_subcommand(
      "probe-heads", "Per-head accuracy drop at a low probe bit-width");
  std::string ph_ckpt;
  long ph_layer = 0;
  int ph_bit = 2;
  ph->add_option("--ckpt", ph_ckpt, "Checkpoint file")->required();
  ph->add_option("--layer", ph_layer, "Block index to probe")->required();
  ph->add_option("--bit", ph_bit, "Probe bit-width (default 2)");
  ph->callback([&] {
    Checkpoint ck = load_checkpoint(ph_ckpt);
    LoadedModel lm = model_from_checkpoint(ck);
    DataBundle data = load_data(lm.cfg.data, lm.cfg.model);
    prepare_frozen_uniform(lm.model, ck, 8, data.train,
                           lm.cfg.train.batch_size,
                           lm.cfg.train.calibration_batches);
    const double baseline =
        evaluate(lm.model, data.eval, lm.cfg.train.batch_size);
    const std::vector<double> drops =
        probe_head_sensitivity(lm.model, data.eval, lm.cfg.train.batch_size,
                               static_cast<size_t>(ph_layer), ph_bit);
    Json out;
    out["layer"] = ph_layer;
    out["probe_bit"] = ph_bit;
    out["baseline_acc"] = baseline;
    out["drops"] = drops;
    std::cout << out.dump() << "\n";
  });

  // probe-mlp
  auto* pm = app.add_subcommand(
      "probe-mlp", "Accuracy with GELU/FC quantizers forced low");
  std::string pm_ckpt;
  int pm_bit = 2;
  pm->add_option("--ckpt", pm_ckpt, "Checkpoint file")->required();
  pm->add_option("--bit", pm_bit, "Probe bit-width (default 2)");
  pm->callback([&] {
    Checkpoint ck = load_checkpoint(pm_ckpt);
    LoadedModel lm = model_from_checkpoint(ck);
    DataBundle data = load_data(lm.cfg.data, lm.cfg.model);
    prepare_frozen_uniform(lm.model, ck, 8, data.train,
                           lm.cfg.train.batch_size,
                           lm.cfg.train.calibration_batches);
    Json out = Json::array();
    for (const auto& [component, acc] : probe_mlp_components(
             lm.model, data.eval, lm.cfg.train.batch_size, pm_bit)) {
      Json row;
      row["component"] = component;
      row["accuracy"] = acc;
      out.push_back(std::move(row));
    }
    std::cout << out.dump() << "\n";
  });

  // bitops
  auto* bo = app.add_subcommand("bitops", "Static complexity report");
  std::string bo_arch = "toy", bo_alloc, bo_out;
  int bo_uniform = 0;
  bo->add_option("--arch", bo_arch,
                 "toy | deit-t | deit-s | model config JSON path");
  bo->add_option("--uniform", bo_uniform,
                 "Uniform interior bit-width (first/last at 8)");
  bo->add_option("--alloc", bo_alloc, "Allocation CSV (name,...,bit)");
  bo->add_option("--out", bo_out, "Write the per-entry CSV here");
  bo->callback([&] {
    ModelConfig cfg = arch_from_flag(bo_arch);
    if ((bo_uniform == 0) == bo_alloc.empty())
      throw CLI::ValidationError(
          "bitops", "pass exactly one of --uniform N or --alloc CSV");
    BitOpsReport report;
    if (bo_uniform != 0) {
      report = model_bitops(cfg, uniform_allocation(cfg, bo_uniform));
      report.budget_gbitops = report.total_gbitops;
    } else {
      report = model_bitops(cfg, allocation_from_csv(bo_alloc));
    }
    if (report.budget_gbitops)
      report.over_budget = report.total_gbitops > *report.budget_gbitops;
    if (!bo_out.empty()) {
      std::ofstream out(bo_out, std::ios::trunc);
      if (!out) throw IoError("cannot write CSV: " + bo_out);
      out << report.to_csv();
    }
    std::cout << report.to_json().dump() << "\n";
  });

  // report-bits
  auto* rb = app.add_subcommand(
      "report-bits", "Allocation CSV plus per-layer head-wise summary");
  std::string rb_ckpt, rb_out;
  rb->add_option("--ckpt", rb_ckpt, "Checkpoint file")->required();
  rb->add_option("--out", rb_out, "Write the per-quantizer allocation here")
      ->required();
  rb->callback([&] {
    Checkpoint ck = load_checkpoint(rb_ckpt);
    LoadedModel lm = model_from_checkpoint(ck);
    std::ofstream out(rb_out, std::ios::trunc);
    if (!out) throw IoError("cannot write CSV: " + rb_out);
    out << allocation_csv(lm.model);
    std::cout << allocation_summary_csv(lm.model);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const LockedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitLocked;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNoInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDataErr;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDataErr;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}
