// SPDX-License-Identifier: Apache-2.0
//
// Release acceptance gate. Runs the eight acceptance criteria in order and
// prints one [PASS]/[FAIL] line per criterion; the exit code is the number
// of failed criteria. argv[1] must be the path to the command-line binary.
//
// Fast oracle checks run in-process against the library; the end-to-end
// pipeline, the complexity report, and the error-exit contract are driven
// through the command-line binary like a user would.
#include <fmt/format.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iterator>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "qvit/bitops.hpp"
#include "qvit/checkpoint.hpp"
#include "qvit/config.hpp"
#include "qvit/data.hpp"
#include "qvit/trainer.hpp"
#include "qvit/vit.hpp"

namespace fs = std::filesystem;
using namespace qvit;

namespace {

std::string g_cli;
fs::path g_tmp;
bool g_current_ok = true;
int g_detail_count = 0;

void expect(bool cond, const std::string& what) {
  if (cond) return;
  g_current_ok = false;
  if (++g_detail_count <= 8)
    std::fprintf(stderr, "       detail: %s\n", what.c_str());
}

bool within(double got, double want, double rel_tol) {
  return std::abs(got - want) <= rel_tol * std::abs(want);
}

struct CmdResult {
  int code = -1;
  std::string out;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd =
      g_cli + " " + args + " 2>>" + (g_tmp / "stderr.log").string();
  CmdResult res;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return res;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0)
    res.out.append(buf, n);
  const int status = ::pclose(pipe);
  res.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const std::exception& e) {
    expect(false, what + " is not valid JSON: " + e.what());
    return Json();
  }
}

std::vector<Json> read_jsonl(const std::string& path) {
  std::vector<Json> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(Json::parse(line));
  return rows;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.in_channels = 1;
  cfg.embed_dim = 16;
  cfg.depth = 1;
  cfg.heads = 1;
  cfg.mlp_dim = 32;
  cfg.num_classes = 3;
  return cfg;
}

RunConfig tiny_run_config() {
  RunConfig rc;
  rc.model.image_size = 16;
  rc.model.patch_size = 8;
  rc.model.in_channels = 1;
  rc.model.embed_dim = 32;
  rc.model.depth = 2;
  rc.model.heads = 2;
  rc.model.mlp_dim = 64;
  rc.model.num_classes = 4;
  rc.train.epochs = 12;
  rc.train.batch_size = 16;
  rc.train.lr_weights = 1e-3;
  rc.train.seed = 5;
  rc.data.kind = "synthetic";
  rc.data.train_count = 64;
  rc.data.eval_count = 32;
  rc.data.noise_sigma = 0.3;
  rc.data.seed = 9;
  return rc;
}

// Small trained float checkpoint shared by the probe and format criteria.
const TrainArtifacts& tiny_artifacts() {
  static TrainArtifacts art =
      pretrain_float(tiny_run_config(), (g_tmp / "tiny_float").string());
  return art;
}

std::map<std::string, Tensor> param_map(QuantizedViT& model) {
  std::map<std::string, Tensor> out;
  for (auto& [name, t] : model.parameters()) out.emplace(name, t);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a->data.size(); ++i)
    worst = std::max(worst, std::abs(a->data[i] - b->data[i]));
  return worst;
}

QuantizerState sweep_state(double b_tilde) {
  QuantizerState q = make_quantizer(QuantRole::kActivation);
  q.b_tilde->data[0] = b_tilde;
  for (int k = 0; k < kNumCandidateBits; ++k)
    q.scales->data[static_cast<size_t>(k)] = 0.1 * (k + 1);
  return q;
}

// --- criterion 1: complexity report vs published totals --------------------

bool criterion_bitops_vs_published() {
  struct Row {
    const char* arch;
    int uniform;
    double want;
  };
  const Row rows[] = {{"deit-t", 4, 21.5},
                      {"deit-t", 3, 12.9},
                      {"deit-s", 4, 76.4},
                      {"deit-s", 3, 44.6}};
  for (const Row& r : rows) {
    CmdResult res = run_cli(fmt::format("bitops --arch {} --uniform {}",
                                        r.arch, r.uniform));
    expect(res.code == 0, fmt::format("bitops {} u{} exited with {}", r.arch,
                                      r.uniform, res.code));
    if (res.code != 0) continue;
    Json j = parse_json(res.out, "bitops output");
    if (!j.contains("total_gbitops")) {
      expect(false, "bitops output lacks total_gbitops");
      continue;
    }
    const double total = j["total_gbitops"].get<double>();
    expect(within(total, r.want, 0.02),
           fmt::format("{} uniform-{}: got {:.4f} G, want {:.1f} G +-2%",
                       r.arch, r.uniform, total, r.want));
  }
  return g_current_ok;
}

// --- criterion 2: quantizer forward/backward vs scalar reference -----------

bool criterion_quantizer_oracle() {
  size_t checked = 0;
  for (double alpha : {0.5, 1.0, 0.03}) {
    for (int bit = kBitMin; bit <= kBitMax; ++bit) {
      for (bool is_signed : {true, false}) {
        const QuantLevels lv = levels(bit, is_signed);
        const double g_scale =
            1.0 / std::sqrt(static_cast<double>(lv.q_max));
        const bool gate_open = bit > kBitMin && bit < kBitMax;
        for (size_t i = 0; i < 241; ++i) {
          const double xv = -6.0 + 0.05 * static_cast<double>(i);
          QuantizerState q = make_quantizer(
              is_signed ? QuantRole::kActivation
                        : QuantRole::kAttentionScore);
          q.is_signed = is_signed;
          q.b_tilde->data[0] = static_cast<double>(bit);
          for (double& s : q.scales->data) s = alpha;

          auto x = make_tensor({1}, {xv}, true);
          Tape tape;
          Tensor y = fake_quantize(tape, x, q);
          const auto ref = oracle::fq_reference(xv, alpha, bit, is_signed);
          expect(y->data[0] == ref.value,
                 fmt::format("forward mismatch x={} a={} b={} s={}", xv,
                             alpha, bit, is_signed));
          tape.backward(tape.sum(y));
          expect(std::abs(x->grad[0] - ref.gx) < 1e-12, "input gradient");
          expect(std::abs(q.scales->grad[static_cast<size_t>(bit - kBitMin)] -
                          ref.galpha_term * g_scale) < 1e-12,
                 "scale gradient");
          for (int k = 0; k < kNumCandidateBits; ++k)
            if (k != bit - kBitMin)
              expect(q.scales->grad[static_cast<size_t>(k)] == 0.0,
                     "inactive scale entry received gradient");
          const double want_gbit = gate_open ? ref.gbit_term : 0.0;
          expect(std::abs(q.b_tilde->grad[0] - want_gbit) < 1e-12,
                 "bit-width gradient");
          ++checked;
          if (!g_current_ok) return false;  // grid details are all alike
        }
      }
    }
  }
  expect(checked == 241u * 7u * 2u * 3u, "grid size");
  return g_current_ok;
}

// --- criterion 3: finite differences and the penalty chain rule ------------

bool criterion_gradient_suite() {
  // Finite differences across one full float-mode transformer block: matrix
  // products, softmax attention, GELU, layer norms, residuals.
  {
    ModelConfig cfg = small_config();
    Rng rng(31);
    QuantizedViT model(cfg, rng);
    auto x = zeros({static_cast<size_t>(cfg.tokens()),
                    static_cast<size_t>(cfg.embed_dim)});
    Rng data_rng(32);
    oracle::fill_normal(x, data_rng);
    x->requires_grad = true;

    std::vector<Tensor> leaves{x};
    for (auto& [name, t] : model.parameters())
      if (name.starts_with("block0.")) leaves.push_back(t);

    const double worst = oracle::max_fd_error(leaves, [&](Tape& tape) {
      return oracle::weighted_readout(tape, model.forward_block(tape, x, 0));
    });
    expect(worst < 1e-5,
           fmt::format("block finite differences: worst {:.3g}", worst));
  }

  // Finite differences through the classification head and cross-entropy.
  {
    ModelConfig cfg = small_config();
    Rng rng(33);
    QuantizedViT model(cfg, rng);
    Dataset ds = gen_synthetic(41, 4, cfg, 0.3);
    Batch batch = gather(ds, {0, 1, 2, 3});
    auto params = param_map(model);
    std::vector<Tensor> leaves{params.at("classifier.weight"),
                               params.at("classifier.bias"),
                               params.at("ln_f.gamma"),
                               params.at("cls_token")};
    const double worst = oracle::max_fd_error(leaves, [&](Tape& tape) {
      Tensor logits = model.forward_batch(tape, batch.images);
      return tape.cross_entropy(logits, batch.labels);
    });
    expect(worst < 1e-5,
           fmt::format("cross-entropy finite differences: worst {:.3g}",
                       worst));
  }

  // Hand chain rule through the budget penalty with two shared bit-widths:
  // terms m1*b1*b2 and m2*b2^2, so d penalty / d b_j = eta*2*(C-c)*dC/db_j.
  {
    const double m1 = 3.0e6, m2 = 5.0e6, eta = 0.7;
    const double b1v = 5.3, b2v = 6.1;
    Tape tape;
    auto b1 = scalar(b1v, true);
    auto b2 = scalar(b2v, true);
    auto c1 = tape.clamp(b1, 2.0, 8.0);
    auto c2 = tape.clamp(b2, 2.0, 8.0);
    auto total = tape.mul_scalar(
        tape.add(tape.mul_scalar(tape.mul(c1, c2), m1),
                 tape.mul_scalar(tape.mul(c2, c2), m2)),
        1e-9);
    const double c_val = (m1 * b1v * b2v + m2 * b2v * b2v) * 1e-9;
    const double budget = c_val * 0.8;
    tape.backward(penalty(tape, total, budget, eta));

    const double common = eta * 2.0 * (c_val - budget);
    expect(std::abs(b1->grad[0] - common * (m1 * b2v) * 1e-9) < 1e-10,
           "penalty chain rule d/db1");
    expect(std::abs(b2->grad[0] -
                    common * (m1 * b1v + 2.0 * m2 * b2v) * 1e-9) < 1e-10,
           "penalty chain rule d/db2");
  }
  return g_current_ok;
}

// --- criterion 4: structural invariants -------------------------------------

bool criterion_structural_invariants() {
  // Quantizer census: depth*(9*heads + 1) + 4*depth + 4 for three shapes.
  {
    std::vector<std::pair<long, long>> shapes{{4, 4}, {2, 2}, {2, 3}};
    for (auto [depth, heads] : shapes) {
      ModelConfig cfg = small_config();
      cfg.embed_dim = 12 * heads;
      cfg.depth = depth;
      cfg.heads = heads;
      cfg.quant_mode = QuantMode::kLearned;
      Rng rng(51);
      QuantizedViT model(cfg, rng);
      const size_t want = static_cast<size_t>(depth * (9 * heads + 1) +
                                              4 * depth + 4);
      expect(model.quantizers().size() == want,
             fmt::format("census for depth={} heads={}: got {}, want {}",
                         depth, heads, model.quantizers().size(), want));
    }
  }

  // Per-head sum formulation equals concatenate-then-project, rebuilt
  // independently from the same parameters.
  for (long heads : {1L, 2L}) {
    ModelConfig cfg = small_config();
    cfg.embed_dim = 16;
    cfg.heads = heads;
    Rng rng(6);
    QuantizedViT model(cfg, rng);
    auto params = param_map(model);
    auto x = zeros({static_cast<size_t>(cfg.tokens()),
                    static_cast<size_t>(cfg.embed_dim)});
    Rng data_rng(7);
    oracle::fill_normal(x, data_rng);

    Tape tape;
    Tensor sum_form = model.forward_msa(tape, x, 0);

    std::vector<Tensor> head_outs, w_o_slices;
    const double inv_sqrt_dh =
        1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    for (long i = 0; i < heads; ++i) {
      const std::string hb = "block0.msa.head" + std::to_string(i) + ".";
      auto q = tape.add_rowvec(tape.matmul(x, params.at(hb + "w_q")),
                               params.at(hb + "b_q"));
      auto k = tape.add_rowvec(tape.matmul(x, params.at(hb + "w_k")),
                               params.at(hb + "b_k"));
      auto v = tape.add_rowvec(tape.matmul(x, params.at(hb + "w_v")),
                               params.at(hb + "b_v"));
      auto attn = tape.softmax_lastdim(tape.mul_scalar(
          tape.matmul(q, tape.transpose_last2(k)), inv_sqrt_dh));
      head_outs.push_back(tape.matmul(attn, v));
      w_o_slices.push_back(params.at(hb + "w_o"));
    }
    Tensor concat_form = tape.add_rowvec(
        tape.matmul(tape.concat_lastdim(head_outs),
                    tape.concat_rows(w_o_slices)),
        params.at("block0.msa.b_o"));
    const double diff = max_abs_diff(sum_form, concat_form);
    expect(heads == 1 ? sum_form->data == concat_form->data : diff < 1e-12,
           fmt::format("sum vs concat attention, heads={}: diff {:.3g}",
                       heads, diff));
  }

  // Allocation set/get round-trip.
  {
    ModelConfig cfg = small_config();
    cfg.quant_mode = QuantMode::kLearned;
    cfg.depth = 2;
    Rng rng(52);
    QuantizedViT model(cfg, rng);
    // Applying an allocation freezes every bit, so pin the starting point
    // first and then check that a get/set cycle is the identity.
    const BitAllocation before = model.get_allocation();
    model.set_allocation(before);
    const auto h0 = model.state_hash();
    model.set_allocation(model.get_allocation());
    expect(model.state_hash() == h0, "identity allocation changed state");
    BitAllocation changed = before;
    changed["block1.mlp.w1"] = 3;
    model.set_allocation(changed);
    expect(model.get_allocation() == changed,
           "allocation did not round-trip");
    expect(model.state_hash() != h0, "allocation change left hash equal");
    model.set_allocation(before);
    expect(model.state_hash() == h0, "allocation restore drifted");
  }
  return g_current_ok;
}

// --- criterion 5: end-to-end two-stage training on synthetic data ----------

bool criterion_end_to_end() {
  const fs::path dir = g_tmp / "e2e";
  fs::create_directories(dir);

  Json data_cfg;
  data_cfg["kind"] = "synthetic";
  data_cfg["train_count"] = 512;
  data_cfg["eval_count"] = 256;
  data_cfg["noise_sigma"] = 0.3;
  data_cfg["seed"] = 1;

  Json float_cfg;
  float_cfg["model"] = {{"arch", "toy"}};
  float_cfg["train"] = {{"epochs", 30},
                        {"batch_size", 64},
                        {"lr_weights", 1e-3},
                        {"seed", 7}};
  float_cfg["data"] = data_cfg;
  std::ofstream(dir / "float.json") << float_cfg.dump(2);

  Json qat_cfg = float_cfg;
  qat_cfg["model"] = {{"arch", "toy"}, {"quant_mode", "learned"}};
  qat_cfg["train"]["epochs"] = 12;
  qat_cfg["train"]["sigma"] = 0.75;
  qat_cfg["train"]["constraint_bits"] = 4;
  // GBitOPs at this scale are ~0.05, so the squared hinge needs a large
  // weight before its gradient competes with the task loss.
  qat_cfg["train"]["eta"] = 1e6;
  std::ofstream(dir / "qat.json") << qat_cfg.dump(2);

  CmdResult pre = run_cli(
      fmt::format("pretrain --config {} --out {}",
                  (dir / "float.json").string(), (dir / "float").string()));
  expect(pre.code == 0, fmt::format("pretrain exited with {}", pre.code));
  if (pre.code != 0) return false;
  Json pre_out = parse_json(pre.out, "pretrain output");
  const double float_train = pre_out.value("train_acc", 0.0);
  const double float_eval = pre_out.value("eval_acc", 0.0);
  expect(float_train >= 0.95,
         fmt::format("float train accuracy {:.4f} < 0.95", float_train));

  CmdResult tr = run_cli(fmt::format(
      "train --config {} --init {} --out {}", (dir / "qat.json").string(),
      pre_out.value("checkpoint", ""), (dir / "qat").string()));
  expect(tr.code == 0, fmt::format("train exited with {}", tr.code));
  if (tr.code != 0) return false;
  Json tr_out = parse_json(tr.out, "train output");
  const double gbitops = tr_out.value("gbitops", 1e9);
  const double budget = tr_out.value("budget_gbitops", 0.0);
  const double qat_eval = tr_out.value("eval_acc", 0.0);
  expect(gbitops <= 1.05 * budget,
         fmt::format("final {:.5f} G exceeds 1.05 x budget {:.5f} G",
                     gbitops, budget));
  expect(qat_eval >= 0.9 * float_eval,
         fmt::format("eval {:.4f} below 90% of float eval {:.4f}", qat_eval,
                     float_eval));

  // Bits provably frozen while diving: every diving epoch logs the
  // identical allocation.
  const auto rows = read_jsonl((dir / "qat" / "metrics.jsonl").string());
  expect(rows.size() == 12, "metrics row count");
  Json frozen_alloc;
  size_t diving_rows = 0, searching_rows = 0;
  for (const auto& row : rows) {
    if (row["stage"] == "searching") {
      ++searching_rows;
      expect(diving_rows == 0, "searching epoch after diving began");
      continue;
    }
    ++diving_rows;
    if (frozen_alloc.is_null())
      frozen_alloc = row["allocation"];
    else
      expect(row["allocation"] == frozen_alloc,
             "allocation moved during the diving stage");
  }
  expect(searching_rows == 9 && diving_rows == 3,
         fmt::format("stage split {} searching / {} diving, want 9/3",
                     searching_rows, diving_rows));
  return g_current_ok;
}

// --- criterion 6: switchable scale vector -----------------------------------

bool criterion_switchable_scales() {
  auto x = make_tensor({5}, {-1.3, -0.4, 0.2, 0.7, 1.9}, true);

  auto run_once = [&](double b_tilde, int* active_out) {
    QuantizerState q = sweep_state(b_tilde);
    Tape tape;
    Tensor sel = select_scale(tape, q);
    Tensor y = fake_quantize(tape, x, q);
    const int active = active_bit(q);
    *active_out = active;
    expect(sel->item() == q.scales->data[static_cast<size_t>(active -
                                                             kBitMin)],
           "selected scale is not the active entry");
    std::fill(x->grad.begin(), x->grad.end(), 0.0);
    tape.backward(tape.sum(y));
    int nonzero = 0, nonzero_idx = -1;
    for (int k = 0; k < kNumCandidateBits; ++k) {
      if (q.scales->grad[static_cast<size_t>(k)] != 0.0) {
        ++nonzero;
        nonzero_idx = k;
      }
    }
    expect(nonzero == 1, fmt::format("{} scale entries got gradient at "
                                     "b~={}, want exactly 1",
                                     nonzero, b_tilde));
    expect(nonzero_idx == active - kBitMin,
           "gradient landed on a non-active scale entry");
    return y->data;
  };

  int a1 = 0, a2 = 0, a3 = 0, a4 = 0;
  auto y_54 = run_once(5.4, &a1);
  auto y_549 = run_once(5.49, &a2);
  auto y_551 = run_once(5.51, &a3);
  auto y_63 = run_once(6.3, &a4);

  // Crossing the rounding boundary at 5.5 switches both the active bit and
  // the scale entry in use; staying on one side of it changes nothing.
  expect(a1 == 5 && a2 == 5 && a3 == 6 && a4 == 6, "active bit sweep");
  expect(y_54 == y_549, "same side of the boundary changed the output");
  expect(y_551 == y_63, "same side of the boundary changed the output");
  expect(y_54 != y_551, "crossing the boundary left the output unchanged");
  return g_current_ok;
}

// --- criterion 7: sensitivity probes are non-destructive --------------------

bool criterion_probes() {
  const TrainArtifacts& art = tiny_artifacts();
  Checkpoint ck = load_checkpoint(art.checkpoint_path);
  RunConfig stored = parse_run_config(ck.meta.at("config"));
  ModelConfig mc = stored.model;
  mc.quant_mode = QuantMode::kLearned;
  Rng rng(61);
  QuantizedViT model(mc, rng);
  DataBundle data = load_data(stored.data, stored.model);
  prepare_frozen_uniform(model, ck, 8, data.train, stored.train.batch_size,
                         stored.train.calibration_batches);

  const auto h0 = model.state_hash();
  for (size_t layer = 0; layer < 2; ++layer) {
    const auto drops = probe_head_sensitivity(model, data.eval,
                                              stored.train.batch_size, layer,
                                              /*probe_bit=*/8);
    expect(drops.size() == 2, "head probe output shape");
    for (double d : drops)
      expect(d == 0.0, fmt::format("8-bit no-op probe produced drop {}", d));
  }
  expect(model.state_hash() == h0, "8-bit head probe mutated the model");

  const auto drops2 = probe_head_sensitivity(model, data.eval,
                                             stored.train.batch_size, 0,
                                             /*probe_bit=*/2);
  expect(drops2.size() == 2, "head probe output shape at bit 2");
  expect(model.state_hash() == h0, "head probe did not restore the model");

  const auto table = probe_mlp_components(model, data.eval,
                                          stored.train.batch_size, 2);
  expect(table.size() == 5, "component probe row count");
  const char* want_rows[] = {"float", "baseline", "gelu_low", "fc_low",
                             "both_low"};
  for (size_t i = 0; i < table.size() && i < 5; ++i)
    expect(table[i].first == want_rows[i], "component probe row labels");
  expect(model.state_hash() == h0, "component probe did not restore the model");

  // The same probes through the command line.
  CmdResult ph = run_cli(fmt::format("probe-heads --ckpt {} --layer 0",
                                     art.checkpoint_path));
  expect(ph.code == 0, fmt::format("probe-heads exited with {}", ph.code));
  if (ph.code == 0) {
    Json j = parse_json(ph.out, "probe-heads output");
    expect(j.contains("drops") && j["drops"].size() == 2,
           "probe-heads drops shape");
  }
  CmdResult pm = run_cli(fmt::format("probe-mlp --ckpt {} --bit 4",
                                     art.checkpoint_path));
  expect(pm.code == 0, fmt::format("probe-mlp exited with {}", pm.code));
  if (pm.code == 0) {
    Json j = parse_json(pm.out, "probe-mlp output");
    expect(j.is_array() && j.size() == 5, "probe-mlp row count");
  }
  return g_current_ok;
}

// --- criterion 8: formats round-trip and fail loudly ------------------------

bool criterion_formats() {
  // Byte-exact image round-trip through the IDX container across the whole
  // byte range.
  {
    Dataset ds;
    ds.channels = 1;
    ds.height = 16;
    ds.width = 16;
    ds.split = "train";
    std::vector<double> img(256);
    for (int p = 0; p < 256; ++p)
      img[static_cast<size_t>(p)] = (p / 255.0 - 0.5) / 0.5;
    ds.images = {img, img};
    ds.labels = {3, 0};
    const std::string ipath = (g_tmp / "rt-images.idx").string();
    const std::string lpath = (g_tmp / "rt-labels.idx").string();
    save_idx(ds, ipath, lpath);
    Dataset back = load_idx(ipath, lpath);
    expect(back.images == ds.images && back.labels == ds.labels,
           "IDX round-trip not exact");
  }

  // Reloading a checkpoint reproduces its logged accuracy exactly.
  {
    const TrainArtifacts& art = tiny_artifacts();
    CmdResult ev = run_cli(fmt::format("eval --ckpt {}", art.checkpoint_path));
    expect(ev.code == 0, fmt::format("eval exited with {}", ev.code));
    if (ev.code == 0) {
      Json j = parse_json(ev.out, "eval output");
      expect(j.contains("top1") && j.contains("logged_eval_acc") &&
                 j["top1"].get<double>() == j["logged_eval_acc"].get<double>(),
             "reloaded accuracy differs from the logged value");
    }
  }

  // Malformed inputs: each failure mode has its own error type.
  {
    bool typed = false;
    try {
      load_checkpoint((g_tmp / "missing.qvck").string());
    } catch (const IoError&) {
      typed = true;
    } catch (...) {
    }
    expect(typed, "missing checkpoint should raise the I/O error");

    std::ifstream in(tiny_artifacts().checkpoint_path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string bytes = ss.str();

    std::string magic_path = (g_tmp / "badmagic.qvck").string();
    {
      std::string corrupt = bytes;
      corrupt[0] ^= 0xFF;
      std::ofstream(magic_path, std::ios::binary) << corrupt;
    }
    typed = false;
    try {
      load_checkpoint(magic_path);
    } catch (const BadMagicError&) {
      typed = true;
    } catch (...) {
    }
    expect(typed, "corrupt magic should raise the bad-magic error");

    std::string short_path = (g_tmp / "short.qvck").string();
    std::ofstream(short_path, std::ios::binary)
        << bytes.substr(0, bytes.size() / 2);
    typed = false;
    try {
      load_checkpoint(short_path);
    } catch (const TruncatedError&) {
      typed = true;
    } catch (...) {
    }
    expect(typed, "truncated payload should raise the truncation error");

    // IDX pair with two images but three labels.
    Dataset two;
    two.channels = 1;
    two.height = 16;
    two.width = 16;
    two.images = {std::vector<double>(256, 0.0),
                  std::vector<double>(256, 0.0)};
    two.labels = {0, 1};
    Dataset three = two;
    three.images.push_back(std::vector<double>(256, 0.0));
    three.labels = {0, 1, 2};
    save_idx(two, (g_tmp / "two.idx").string(), (g_tmp / "two-l.idx").string());
    save_idx(three, (g_tmp / "three.idx").string(),
             (g_tmp / "three-l.idx").string());
    typed = false;
    try {
      load_idx((g_tmp / "two.idx").string(), (g_tmp / "three-l.idx").string());
    } catch (const CountMismatchError&) {
      typed = true;
    } catch (...) {
    }
    expect(typed, "image/label count mismatch should raise its own error");
  }

  // The same contract at the process boundary: distinct exit codes.
  {
    expect(run_cli("frobnicate").code == 64, "unknown subcommand exit code");
    expect(run_cli("eval --ckpt /nonexistent/x.qvck").code == 66,
           "unreadable input exit code");
    const std::string bad_cfg = (g_tmp / "bad.json").string();
    std::ofstream(bad_cfg) << "{\"model\": {\"bogus_key\": 1}}";
    expect(run_cli(fmt::format("pretrain --config {} --out {}", bad_cfg,
                               (g_tmp / "bad-run").string()))
                   .code == 65,
           "schema violation exit code");
  }
  return g_current_ok;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <path-to-cli-binary>\n");
    return 2;
  }
  g_cli = argv[1];

  char tmpl[] = "/tmp/qvit_acceptance_XXXXXX";
  if (!::mkdtemp(tmpl)) {
    std::fprintf(stderr, "cannot create temporary directory\n");
    return 2;
  }
  g_tmp = tmpl;

  struct Criterion {
    const char* label;
    bool (*fn)();
  };
  const Criterion criteria[] = {
      {"complexity report matches published uniform-bit totals (+-2%)",
       criterion_bitops_vs_published},
      {"quantizer forward/backward matches the scalar reference on the "
       "full grid",
       criterion_quantizer_oracle},
      {"finite-difference gradient suite and penalty chain rule",
       criterion_gradient_suite},
      {"structural invariants: census, attention forms, allocation "
       "round-trip",
       criterion_structural_invariants},
      {"end-to-end two-stage training meets budget and accuracy targets",
       criterion_end_to_end},
      {"rounding-boundary sweep switches exactly one live scale entry",
       criterion_switchable_scales},
      {"sensitivity probes are shape-correct and non-destructive",
       criterion_probes},
      {"containers round-trip exactly and malformed inputs fail typed",
       criterion_formats},
  };

  int failed = 0;
  for (size_t i = 0; i < std::size(criteria); ++i) {
    g_current_ok = true;
    g_detail_count = 0;
    bool ok = false;
    try {
      ok = criteria[i].fn();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "       detail: unexpected exception: %s\n",
                   e.what());
      ok = false;
    }
    std::printf("[%s] %zu. %s\n", ok ? "PASS" : "FAIL", i + 1,
                criteria[i].label);
    std::fflush(stdout);
    if (!ok) ++failed;
  }

  std::error_code ec;
  fs::remove_all(g_tmp, ec);
  return failed;
}
