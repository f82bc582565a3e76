// SPDX-License-Identifier: Apache-2.0
#include "qvit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "fmt/format.h"
#include "qvit/bitops.hpp"

namespace qvit {

namespace {

bool weight_decay_eligible(const std::string& name) {
  for (const char* suffix :
       {".weight", ".w_q", ".w_k", ".w_v", ".w_o", ".w1", ".w2"}) {
    if (name.ends_with(suffix)) return true;
  }
  return false;
}

std::string timestamp_utc() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

size_t argmax_row(const Tensor& logits, size_t row) {
  const size_t cols = logits->cols();
  size_t best = 0;
  double best_v = logits->at(row, 0);
  for (size_t j = 1; j < cols; ++j) {
    if (logits->at(row, j) > best_v) {
      best_v = logits->at(row, j);
      best = j;
    }
  }
  return best;
}

size_t count_hits(const Tensor& logits, const std::vector<int>& labels) {
  size_t hits = 0;
  for (size_t r = 0; r < labels.size(); ++r) {
    if (argmax_row(logits, r) == static_cast<size_t>(labels[r])) ++hits;
  }
  return hits;
}

void zero_all_grads(QuantizedViT& model) {
  for (auto& [name, t] : model.parameters()) t->zero_grad();
  for (auto& [name, q] : model.quantizers()) {
    q->b_tilde->zero_grad();
    q->scales->zero_grad();
  }
}

// Plain gradient descent on quantizer parameters. Bit-widths move only while
// live (searching stage); scales move whenever they received gradient, which
// the selection rule confines to the active entry. Values are projected back
// into their valid ranges after the step.
void quant_sgd_step(QuantizedViT& model, double lr, bool update_bits) {
  for (auto& [name, q] : model.quantizers()) {
    if (update_bits && !q->frozen_bit && !q->b_tilde->grad.empty()) {
      double b = q->b_tilde->data[0] - lr * q->b_tilde->grad[0];
      q->b_tilde->data[0] =
          std::min(std::max(b, static_cast<double>(kBitMin)),
                   static_cast<double>(kBitMax));
    }
    if (!q->scales->grad.empty()) {
      for (size_t i = 0; i < q->scales->data.size(); ++i) {
        double s = q->scales->data[i] - lr * q->scales->grad[i];
        q->scales->data[i] = std::max(s, 1e-8);
      }
    }
  }
}

void freeze_all_bits(QuantizedViT& model) {
  for (auto& [name, q] : model.quantizers())
    q->frozen_bit = discretize_bit(q->b_tilde->item());
}

long parse_layer(const std::string& name) {
  if (!name.starts_with("block")) return -1;
  return std::stol(name.substr(5));
}

long parse_head(const std::string& name) {
  const size_t pos = name.rfind("head");
  if (pos == std::string::npos) return -1;
  const size_t digits = pos + 4;
  if (digits >= name.size() || !std::isdigit(name[digits])) return -1;
  return std::stol(name.substr(digits));
}

std::vector<std::string> head_quantizer_names(size_t layer, long head) {
  const std::string base = fmt::format("block{}.msa.", layer);
  const std::string hd = fmt::format("head{}", head);
  return {base + hd + ".q",     base + hd + ".k",    base + hd + ".v",
          base + hd + ".attn",  base + hd + ".out",  base + "w_q." + hd,
          base + "w_k." + hd,   base + "w_v." + hd,  base + "w_o." + hd};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

AdamW::AdamW(const TrainConfig& tc,
             const std::vector<std::pair<std::string, Tensor>>& params)
    : weight_decay_(tc.weight_decay),
      beta1_(tc.beta1),
      beta2_(tc.beta2),
      eps_(tc.adam_eps) {
  slots_.reserve(params.size());
  for (const auto& [name, t] : params) {
    Slot slot;
    slot.param = t;
    slot.m.assign(t->numel(), 0.0);
    slot.v.assign(t->numel(), 0.0);
    slot.decay = weight_decay_eligible(name);
    slots_.push_back(std::move(slot));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Slot& slot : slots_) {
    if (slot.param->grad.empty()) continue;
    auto& data = slot.param->data;
    const auto& grad = slot.param->grad;
    for (size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      data[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps_));
      if (slot.decay) data[i] -= lr * weight_decay_ * data[i];
    }
  }
}

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  double x = static_cast<double>(step) / static_cast<double>(total);
  x = std::min(std::max(x, 0.0), 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

DataBundle load_data(const DataConfig& dc, const ModelConfig& mc) {
  dc.validate();
  DataBundle bundle;
  if (dc.kind == "synthetic") {
    Dataset all = gen_synthetic(dc.seed, dc.train_count + dc.eval_count, mc,
                                dc.noise_sigma, "all");
    bundle.train.channels = bundle.eval.channels = all.channels;
    bundle.train.height = bundle.eval.height = all.height;
    bundle.train.width = bundle.eval.width = all.width;
    bundle.train.split = "train";
    bundle.eval.split = "eval";
    const size_t split = static_cast<size_t>(dc.train_count);
    bundle.train.images.assign(all.images.begin(),
                               all.images.begin() + static_cast<long>(split));
    bundle.train.labels.assign(all.labels.begin(),
                               all.labels.begin() + static_cast<long>(split));
    bundle.eval.images.assign(all.images.begin() + static_cast<long>(split),
                              all.images.end());
    bundle.eval.labels.assign(all.labels.begin() + static_cast<long>(split),
                              all.labels.end());
  } else {
    bundle.train = load_idx(dc.train_images, dc.train_labels);
    bundle.train.split = "train";
    bundle.eval = load_idx(dc.eval_images, dc.eval_labels);
    bundle.eval.split = "eval";
  }
  for (const Dataset* ds : {&bundle.train, &bundle.eval}) {
    if (ds->channels != mc.in_channels || ds->height != mc.image_size ||
        ds->width != mc.image_size)
      throw ConfigError(fmt::format(
          "dataset shape {}x{}x{} does not match model {}x{}x{}",
          ds->channels, ds->height, ds->width, mc.in_channels, mc.image_size,
          mc.image_size));
    ds->validate(mc.num_classes);
  }
  return bundle;
}

double evaluate(QuantizedViT& model, const Dataset& ds, long batch_size) {
  Rng unused(0);
  size_t hits = 0;
  for (const auto& idx : batch_indices(ds.size(),
                                       static_cast<size_t>(batch_size), unused,
                                       /*shuffle=*/false)) {
    Batch b = gather(ds, idx);
    Tape tape(/*recording=*/false);
    Tensor logits = model.forward_batch(tape, b.images);
    hits += count_hits(logits, b.labels);
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

void calibrate_all_scales(QuantizedViT& model, const Dataset& calib,
                          long batch_size, long calib_batches) {
  auto quants = model.quantizers();
  std::map<std::string, QuantizerState*> by_name(quants.begin(), quants.end());

  for (const auto& [qname, w] : model.weight_tensor_by_quantizer())
    mse_init_all_scales(*by_name.at(qname), w->data);

  std::map<std::string, std::vector<double>> samples;
  const QuantMode saved_mode = model.config().quant_mode;
  model.set_quant_mode(QuantMode::kFloat);
  model.set_activation_hook([&samples](const std::string& name,
                                       const Tensor& x) {
    auto& dst = samples[name];
    dst.insert(dst.end(), x->data.begin(), x->data.end());
  });
  Rng unused(0);
  long used = 0;
  for (const auto& idx : batch_indices(calib.size(),
                                       static_cast<size_t>(batch_size), unused,
                                       /*shuffle=*/false)) {
    if (used++ >= calib_batches) break;
    Batch b = gather(calib, idx);
    Tape tape(/*recording=*/false);
    model.forward_batch(tape, b.images);
  }
  model.set_activation_hook(nullptr);
  model.set_quant_mode(saved_mode);

  for (auto& [name, q] : quants) {
    if (q->role == QuantRole::kWeight) continue;
    auto it = samples.find(name);
    if (it == samples.end() || it->second.empty())
      throw ValueError("no calibration samples for quantizer: " + name);
    mse_init_all_scales(*q, it->second);
  }
}

void init_qat(QuantizedViT& model, const Checkpoint& float_ckpt,
              const TrainConfig& tc, const Dataset& calib) {
  tc.validate();
  restore_model(model, float_ckpt);
  // Interior bit-widths start one above the constraint; the first and last
  // layers start at 8 but stay learnable. Init stays inside [2, 8] so the
  // budget gradient can always reach it.
  const double interior =
      std::min(static_cast<double>(tc.constraint_bits + 1),
               static_cast<double>(kBitMax));
  for (auto& [name, q] : model.quantizers()) {
    const bool first_or_last = name.starts_with("patch_embed.") ||
                               name.starts_with("classifier.");
    q->b_tilde->data[0] = first_or_last ? 8.0 : interior;
    q->b_tilde->zero_grad();
    q->scales->zero_grad();
    q->frozen_bit.reset();
  }
  calibrate_all_scales(model, calib, tc.batch_size, tc.calibration_batches);
  model.set_quant_mode(QuantMode::kLearned);
}

void prepare_frozen_uniform(QuantizedViT& model, const Checkpoint& ckpt,
                            int bit, const Dataset& calib, long batch_size,
                            long calib_batches) {
  if (bit < kBitMin || bit > kBitMax)
    throw ValueError("prepare_frozen_uniform: bit outside [2, 8]");
  restore_model(model, ckpt);
  for (auto& [name, q] : model.quantizers()) {
    q->b_tilde->data[0] = static_cast<double>(bit);
    q->frozen_bit = bit;
  }
  calibrate_all_scales(model, calib, batch_size, calib_batches);
  model.set_quant_mode(QuantMode::kLearned);
}

TrainArtifacts pretrain_float(const RunConfig& cfg,
                              const std::string& out_dir) {
  cfg.train.validate();
  std::filesystem::create_directories(out_dir);

  RunConfig local = cfg;
  local.model.quant_mode = QuantMode::kFloat;
  Rng rng(local.train.seed);
  QuantizedViT model(local.model, rng);
  DataBundle data = load_data(local.data, local.model);

  AdamW opt(local.train, model.parameters());
  const long steps_per_epoch = static_cast<long>(
      (data.train.size() + static_cast<size_t>(local.train.batch_size) - 1) /
      static_cast<size_t>(local.train.batch_size));
  const long total_steps = local.train.epochs * steps_per_epoch;

  const std::string metrics_path = out_dir + "/metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics: " + metrics_path);

  long step = 0;
  for (long epoch = 0; epoch < local.train.epochs; ++epoch) {
    double loss_sum = 0.0;
    size_t hits = 0;
    double lr = 0.0;
    for (const auto& idx :
         batch_indices(data.train.size(),
                       static_cast<size_t>(local.train.batch_size), rng,
                       /*shuffle=*/true)) {
      Batch b = gather(data.train, idx);
      Tape tape;
      Tensor logits = model.forward_batch(tape, b.images);
      Tensor loss = tape.cross_entropy(logits, b.labels);
      tape.backward(loss);
      lr = cosine_lr(local.train.lr_weights, step, total_steps);
      opt.step(lr);
      zero_all_grads(model);
      loss_sum += loss->item() * static_cast<double>(b.labels.size());
      hits += count_hits(logits, b.labels);
      ++step;
    }
    const double train_acc =
        static_cast<double>(hits) / static_cast<double>(data.train.size());
    const double eval_acc =
        evaluate(model, data.eval, local.train.batch_size);
    Json row;
    row["epoch"] = epoch;
    row["train_loss"] = loss_sum / static_cast<double>(data.train.size());
    row["train_acc"] = train_acc;
    row["eval_acc"] = eval_acc;
    row["lr_weights"] = lr;
    metrics << row.dump() << "\n";
  }
  metrics.close();

  // Round weights through f32 before the logged accuracies are measured, so
  // a reloaded checkpoint reproduces them exactly.
  Checkpoint ck = snapshot_model(model, Json::object());
  restore_model(model, ck);
  TrainArtifacts art;
  art.metrics_path = metrics_path;
  art.final_train_acc = evaluate(model, data.train, local.train.batch_size);
  art.final_eval_acc = evaluate(model, data.eval, local.train.batch_size);

  Json meta;
  meta["kind"] = "float";
  meta["config"] = run_config_to_json(local);
  meta["epoch"] = local.train.epochs;
  meta["rng"] = rng.serialize();
  meta["train_acc"] = art.final_train_acc;
  meta["eval_acc"] = art.final_eval_acc;
  meta["created_utc"] = timestamp_utc();
  ck.meta = std::move(meta);

  art.checkpoint_path = out_dir + "/float.qvck";
  save_checkpoint(art.checkpoint_path, ck);
  return art;
}

TrainArtifacts train_qat(const RunConfig& cfg,
                         const std::string& float_ckpt_path,
                         const std::string& out_dir) {
  cfg.train.validate();
  std::filesystem::create_directories(out_dir);
  std::filesystem::create_directories(out_dir + "/allocations");

  Checkpoint float_ckpt = load_checkpoint(float_ckpt_path);
  RunConfig local = cfg;
  local.model.quant_mode = QuantMode::kLearned;
  Rng rng(local.train.seed);
  QuantizedViT model(local.model, rng);
  DataBundle data = load_data(local.data, local.model);
  init_qat(model, float_ckpt, local.train, data.train);

  const double budget = uniform_budget(local.model, local.train.constraint_bits);
  std::map<std::string, Tensor> b_tilde_by_name;
  for (auto& [name, q] : model.quantizers())
    b_tilde_by_name.emplace(name, q->b_tilde);

  AdamW opt(local.train, model.parameters());
  const long steps_per_epoch = static_cast<long>(
      (data.train.size() + static_cast<size_t>(local.train.batch_size) - 1) /
      static_cast<size_t>(local.train.batch_size));
  const long total_steps = local.train.epochs * steps_per_epoch;
  const long boundary = std::lround(local.train.sigma *
                                    static_cast<double>(local.train.epochs));

  const std::string metrics_path = out_dir + "/metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics: " + metrics_path);

  bool frozen = false;
  long step = 0;
  for (long epoch = 0; epoch < local.train.epochs; ++epoch) {
    if (!frozen && epoch >= boundary) {
      freeze_all_bits(model);
      frozen = true;
    }
    const bool searching = !frozen;

    double loss_sum = 0.0;
    double penalty_sum = 0.0;
    size_t hits = 0;
    double lr = 0.0;
    long batches = 0;
    for (const auto& idx :
         batch_indices(data.train.size(),
                       static_cast<size_t>(local.train.batch_size), rng,
                       /*shuffle=*/true)) {
      Batch b = gather(data.train, idx);
      Tape tape;
      Tensor logits = model.forward_batch(tape, b.images);
      Tensor loss = tape.cross_entropy(logits, b.labels);
      if (searching) {
        Tensor cont = continuous_bitops(tape, local.model, b_tilde_by_name);
        Tensor pen = penalty(tape, cont, budget, local.train.eta);
        penalty_sum += pen->item();
        loss = tape.add(loss, pen);
      }
      tape.backward(loss);
      lr = cosine_lr(local.train.lr_weights, step, total_steps);
      opt.step(lr);
      quant_sgd_step(model, local.train.lr_quant, /*update_bits=*/searching);
      zero_all_grads(model);
      loss_sum += loss->item() * static_cast<double>(b.labels.size());
      hits += count_hits(logits, b.labels);
      ++step;
      ++batches;
    }

    const double train_acc =
        static_cast<double>(hits) / static_cast<double>(data.train.size());
    const double eval_acc =
        evaluate(model, data.eval, local.train.batch_size);
    const BitAllocation alloc = model.get_allocation();
    const double gbitops =
        model_bitops(local.model, alloc).total_gbitops;

    Json row;
    row["epoch"] = epoch;
    row["stage"] = searching ? "searching" : "diving";
    row["train_loss"] = loss_sum / static_cast<double>(data.train.size());
    row["train_acc"] = train_acc;
    row["eval_acc"] = eval_acc;
    row["lr_weights"] = lr;
    row["penalty"] =
        batches > 0 ? penalty_sum / static_cast<double>(batches) : 0.0;
    row["gbitops"] = gbitops;
    row["budget_gbitops"] = budget;
    row["allocation"] = Json(alloc);
    metrics << row.dump() << "\n";

    std::ofstream alloc_csv(
        fmt::format("{}/allocations/epoch_{:04}.csv", out_dir, epoch),
        std::ios::trunc);
    alloc_csv << allocation_csv(model);
  }
  metrics.close();

  // A run that never reached the boundary (sigma = 1) still ships settled
  // bits in its artifact.
  if (!frozen) freeze_all_bits(model);

  Checkpoint ck = snapshot_model(model, Json::object());
  restore_model(model, ck);
  TrainArtifacts art;
  art.metrics_path = metrics_path;
  art.final_train_acc = evaluate(model, data.train, local.train.batch_size);
  art.final_eval_acc = evaluate(model, data.eval, local.train.batch_size);
  art.final_gbitops =
      model_bitops(local.model, model.get_allocation()).total_gbitops;
  art.budget_gbitops = budget;

  Json meta;
  meta["kind"] = "qat";
  meta["config"] = run_config_to_json(local);
  meta["epoch"] = local.train.epochs;
  meta["rng"] = rng.serialize();
  meta["train_acc"] = art.final_train_acc;
  meta["eval_acc"] = art.final_eval_acc;
  meta["gbitops"] = art.final_gbitops;
  meta["budget_gbitops"] = art.budget_gbitops;
  meta["created_utc"] = timestamp_utc();
  ck.meta = std::move(meta);

  art.checkpoint_path = out_dir + "/qat.qvck";
  save_checkpoint(art.checkpoint_path, ck);
  return art;
}

std::vector<double> probe_head_sensitivity(QuantizedViT& model,
                                           const Dataset& eval_ds,
                                           long batch_size, size_t layer,
                                           int probe_bit) {
  const ModelConfig& cfg = model.config();
  if (layer >= static_cast<size_t>(cfg.depth))
    throw ValueError(fmt::format("probe layer {} out of range [0, {})", layer,
                                 cfg.depth));
  if (probe_bit < kBitMin || probe_bit > kBitMax)
    throw ValueError("probe bit outside [2, 8]");

  auto quants = model.quantizers();
  std::map<std::string, QuantizerState*> by_name(quants.begin(), quants.end());
  const double baseline = evaluate(model, eval_ds, batch_size);

  std::vector<double> drops;
  drops.reserve(static_cast<size_t>(cfg.heads));
  for (long head = 0; head < cfg.heads; ++head) {
    std::vector<std::pair<QuantizerState*, std::optional<int>>> saved;
    for (const std::string& name : head_quantizer_names(layer, head)) {
      QuantizerState* q = by_name.at(name);
      saved.emplace_back(q, q->frozen_bit);
      q->frozen_bit = probe_bit;
    }
    drops.push_back(baseline - evaluate(model, eval_ds, batch_size));
    for (auto& [q, bit] : saved) q->frozen_bit = bit;
  }
  return drops;
}

std::vector<std::pair<std::string, double>> probe_mlp_components(
    QuantizedViT& model, const Dataset& eval_ds, long batch_size,
    int probe_bit) {
  if (probe_bit < kBitMin || probe_bit > kBitMax)
    throw ValueError("probe bit outside [2, 8]");
  const ModelConfig& cfg = model.config();

  auto quants = model.quantizers();
  std::map<std::string, QuantizerState*> by_name(quants.begin(), quants.end());

  std::vector<std::string> gelu_names, fc_names;
  for (long l = 0; l < cfg.depth; ++l) {
    const std::string base = fmt::format("block{}.mlp.", l);
    gelu_names.push_back(base + "gelu");
    fc_names.push_back(base + "x_in");
    fc_names.push_back(base + "w1");
    fc_names.push_back(base + "w2");
  }

  auto eval_with_low = [&](const std::vector<std::string>& names) {
    std::vector<std::pair<QuantizerState*, std::optional<int>>> saved;
    for (const std::string& name : names) {
      QuantizerState* q = by_name.at(name);
      saved.emplace_back(q, q->frozen_bit);
      q->frozen_bit = probe_bit;
    }
    const double acc = evaluate(model, eval_ds, batch_size);
    for (auto& [q, bit] : saved) q->frozen_bit = bit;
    return acc;
  };

  std::vector<std::pair<std::string, double>> table;
  const QuantMode saved_mode = cfg.quant_mode;
  model.set_quant_mode(QuantMode::kFloat);
  table.emplace_back("float", evaluate(model, eval_ds, batch_size));
  model.set_quant_mode(saved_mode);
  table.emplace_back("baseline", evaluate(model, eval_ds, batch_size));
  table.emplace_back("gelu_low", eval_with_low(gelu_names));
  table.emplace_back("fc_low", eval_with_low(fc_names));
  std::vector<std::string> both = gelu_names;
  both.insert(both.end(), fc_names.begin(), fc_names.end());
  table.emplace_back("both_low", eval_with_low(both));
  return table;
}

std::string allocation_csv(const QuantizedViT& model) {
  std::ostringstream out;
  out << "name,layer,head,role,bit\n";
  for (const auto& [name, q] : model.quantizers()) {
    out << fmt::format("{},{},{},{},{}\n", name, parse_layer(name),
                       parse_head(name), role_name(q->role), active_bit(*q));
  }
  return out.str();
}

std::string allocation_summary_csv(const QuantizedViT& model) {
  // Stats over head-owned quantizers, grouped by (layer, role).
  std::map<std::pair<long, std::string>, std::vector<double>> groups;
  for (const auto& [name, q] : model.quantizers()) {
    const long layer = parse_layer(name);
    if (layer < 0 || parse_head(name) < 0) continue;
    groups[{layer, role_name(q->role)}].push_back(
        static_cast<double>(active_bit(*q)));
  }
  std::ostringstream out;
  out << "layer,role,min,median,max,mean\n";
  for (const auto& [key, bits] : groups) {
    const double mn = *std::min_element(bits.begin(), bits.end());
    const double mx = *std::max_element(bits.begin(), bits.end());
    double mean = 0.0;
    for (double b : bits) mean += b;
    mean /= static_cast<double>(bits.size());
    out << fmt::format("{},{},{:.6g},{:.6g},{:.6g},{:.6g}\n", key.first,
                       key.second, mn, median(bits), mx, mean);
  }
  return out.str();
}

}  // namespace qvit
