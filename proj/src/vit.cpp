// SPDX-License-Identifier: Apache-2.0
#include "qvit/vit.hpp"

#include <cmath>
#include <cstring>
#include <utility>

#include "fmt/format.h"

namespace qvit {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kInitStd = 0.02;

Tensor init_matrix(Rng& rng, size_t rows, size_t cols) {
  auto t = zeros({rows, cols}, /*requires_grad=*/true);
  for (double& v : t->data) v = rng.normal(0.0, kInitStd);
  return t;
}

std::uint64_t fnv1a_bytes(const void* data, size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a_doubles(const std::vector<double>& v, std::uint64_t h) {
  for (double d : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    h = fnv1a_bytes(&bits, sizeof(bits), h);
  }
  return h;
}

}  // namespace

Tensor patchify(const ModelConfig& cfg, const Tensor& image) {
  const size_t c = static_cast<size_t>(cfg.in_channels);
  const size_t hw = static_cast<size_t>(cfg.image_size);
  const size_t p = static_cast<size_t>(cfg.patch_size);
  const size_t grid = static_cast<size_t>(cfg.grid());
  if (image->numel() != c * hw * hw)
    throw ShapeError(fmt::format("patchify: image has {} elements, expected {}",
                                 image->numel(), c * hw * hw));
  auto out = zeros({grid * grid, c * p * p});
  size_t idx = 0;
  for (size_t gy = 0; gy < grid; ++gy) {
    for (size_t gx = 0; gx < grid; ++gx) {
      for (size_t ch = 0; ch < c; ++ch) {
        for (size_t py = 0; py < p; ++py) {
          for (size_t px = 0; px < p; ++px) {
            size_t y = gy * p + py, x = gx * p + px;
            out->data[idx++] = image->data[(ch * hw + y) * hw + x];
          }
        }
      }
    }
  }
  return out;
}

QuantizedViT::QuantizedViT(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const size_t d = static_cast<size_t>(cfg_.embed_dim);
  const size_t dh = static_cast<size_t>(cfg_.head_dim());
  const size_t dm = static_cast<size_t>(cfg_.mlp_dim);
  const size_t n = static_cast<size_t>(cfg_.tokens());
  const size_t pd = static_cast<size_t>(cfg_.patch_dim());
  const size_t classes = static_cast<size_t>(cfg_.num_classes);

  cls_token_ = init_matrix(rng, 1, d);
  pos_embed_ = init_matrix(rng, n, d);
  patch_w_ = init_matrix(rng, pd, d);
  patch_b_ = zeros({d}, /*requires_grad=*/true);
  patch_qx_ = make_quantizer(QuantRole::kActivation);
  patch_qw_ = make_quantizer(QuantRole::kWeight);

  blocks_.resize(static_cast<size_t>(cfg_.depth));
  for (Block& blk : blocks_) {
    blk.msa.x_in = make_quantizer(QuantRole::kActivation);
    blk.msa.heads.resize(static_cast<size_t>(cfg_.heads));
    for (MsaHead& head : blk.msa.heads) {
      head.w_q = init_matrix(rng, d, dh);
      head.b_q = zeros({dh}, /*requires_grad=*/true);
      head.w_k = init_matrix(rng, d, dh);
      head.b_k = zeros({dh}, /*requires_grad=*/true);
      head.w_v = init_matrix(rng, d, dh);
      head.b_v = zeros({dh}, /*requires_grad=*/true);
      head.w_o = init_matrix(rng, dh, d);
      head.qw_q = make_quantizer(QuantRole::kWeight);
      head.qw_k = make_quantizer(QuantRole::kWeight);
      head.qw_v = make_quantizer(QuantRole::kWeight);
      head.qw_o = make_quantizer(QuantRole::kWeight);
      head.q_q = make_quantizer(QuantRole::kQEmbed);
      head.q_k = make_quantizer(QuantRole::kKEmbed);
      head.q_v = make_quantizer(QuantRole::kVEmbed);
      head.q_attn = make_quantizer(QuantRole::kAttentionScore);
      head.q_out = make_quantizer(QuantRole::kHeadOutput);
    }
    blk.msa.b_o = zeros({d}, /*requires_grad=*/true);
    blk.ln1_gamma = full({d}, 1.0, /*requires_grad=*/true);
    blk.ln1_beta = zeros({d}, /*requires_grad=*/true);
    blk.mlp.x_in = make_quantizer(QuantRole::kActivation);
    blk.mlp.w1 = init_matrix(rng, d, dm);
    blk.mlp.b1 = zeros({dm}, /*requires_grad=*/true);
    blk.mlp.qw1 = make_quantizer(QuantRole::kWeight);
    blk.mlp.gelu_out = make_quantizer(QuantRole::kActivation);
    blk.mlp.w2 = init_matrix(rng, dm, d);
    blk.mlp.b2 = zeros({d}, /*requires_grad=*/true);
    blk.mlp.qw2 = make_quantizer(QuantRole::kWeight);
    blk.ln2_gamma = full({d}, 1.0, /*requires_grad=*/true);
    blk.ln2_beta = zeros({d}, /*requires_grad=*/true);
  }

  ln_f_gamma_ = full({d}, 1.0, /*requires_grad=*/true);
  ln_f_beta_ = zeros({d}, /*requires_grad=*/true);
  cls_w_ = init_matrix(rng, d, classes);
  cls_b_ = zeros({classes}, /*requires_grad=*/true);
  cls_qx_ = make_quantizer(QuantRole::kActivation);
  cls_qw_ = make_quantizer(QuantRole::kWeight);

  if (cfg_.quant_mode == QuantMode::kUniform) {
    for (auto& [name, q] : quantizers()) {
      q->frozen_bit = cfg_.uniform_bits;
      q->b_tilde->data[0] = static_cast<double>(cfg_.uniform_bits);
    }
  }
}

Tensor QuantizedViT::quantize_act(Tape& tape, const Tensor& x,
                                  const std::string& name, QuantizerState& q) {
  if (hook_) hook_(name, x);
  if (cfg_.quant_mode == QuantMode::kFloat) return x;
  return fake_quantize(tape, x, q);
}

Tensor QuantizedViT::quantize_weight(Tape& tape, const Tensor& w,
                                     QuantizerState& q) {
  if (cfg_.quant_mode == QuantMode::kFloat) return w;
  return fake_quantize(tape, w, q);
}

Tensor QuantizedViT::forward_msa(Tape& tape, const Tensor& x,
                                 size_t block_index) {
  Block& blk = blocks_.at(block_index);
  Msa& msa = blk.msa;
  const std::string base = fmt::format("block{}.msa.", block_index);
  Tensor xq = quantize_act(tape, x, base + "x_in", msa.x_in);
  const double inv_sqrt_dh =
      1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));

  Tensor out;
  for (size_t i = 0; i < msa.heads.size(); ++i) {
    MsaHead& h = msa.heads[i];
    const std::string hb = base + fmt::format("head{}.", i);
    Tensor q = tape.add_rowvec(
        tape.matmul(xq, quantize_weight(tape, h.w_q, h.qw_q)), h.b_q);
    Tensor k = tape.add_rowvec(
        tape.matmul(xq, quantize_weight(tape, h.w_k, h.qw_k)), h.b_k);
    Tensor v = tape.add_rowvec(
        tape.matmul(xq, quantize_weight(tape, h.w_v, h.qw_v)), h.b_v);
    q = quantize_act(tape, q, hb + "q", h.q_q);
    k = quantize_act(tape, k, hb + "k", h.q_k);
    v = quantize_act(tape, v, hb + "v", h.q_v);
    Tensor scores =
        tape.mul_scalar(tape.matmul(q, tape.transpose_last2(k)), inv_sqrt_dh);
    Tensor attn = tape.softmax_lastdim(scores);
    attn = quantize_act(tape, attn, hb + "attn", h.q_attn);
    Tensor head = tape.matmul(attn, v);
    head = quantize_act(tape, head, hb + "out", h.q_out);
    Tensor contrib = tape.matmul(head, quantize_weight(tape, h.w_o, h.qw_o));
    out = out ? tape.add(out, contrib) : contrib;
  }
  return tape.add_rowvec(out, msa.b_o);
}

Tensor QuantizedViT::forward_mlp(Tape& tape, const Tensor& x,
                                 size_t block_index) {
  Block& blk = blocks_.at(block_index);
  Mlp& mlp = blk.mlp;
  const std::string base = fmt::format("block{}.mlp.", block_index);
  Tensor xq = quantize_act(tape, x, base + "x_in", mlp.x_in);
  Tensor h = tape.add_rowvec(
      tape.matmul(xq, quantize_weight(tape, mlp.w1, mlp.qw1)), mlp.b1);
  Tensor g = tape.gelu(h);
  Tensor gq = quantize_act(tape, g, base + "gelu", mlp.gelu_out);
  return tape.add_rowvec(
      tape.matmul(gq, quantize_weight(tape, mlp.w2, mlp.qw2)), mlp.b2);
}

Tensor QuantizedViT::forward_block(Tape& tape, const Tensor& x,
                                   size_t block_index) {
  if (block_index >= blocks_.size())
    throw ValueError("forward_block: block index out of range");
  Block& blk = blocks_[block_index];
  if (cfg_.pre_norm) {
    Tensor h = tape.add(
        x, forward_msa(
               tape, tape.layernorm(x, blk.ln1_gamma, blk.ln1_beta, kLnEps),
               block_index));
    return tape.add(
        h, forward_mlp(
               tape, tape.layernorm(h, blk.ln2_gamma, blk.ln2_beta, kLnEps),
               block_index));
  }
  Tensor h = tape.layernorm(tape.add(x, forward_msa(tape, x, block_index)),
                            blk.ln1_gamma, blk.ln1_beta, kLnEps);
  return tape.layernorm(tape.add(h, forward_mlp(tape, h, block_index)),
                        blk.ln2_gamma, blk.ln2_beta, kLnEps);
}

Tensor QuantizedViT::forward(Tape& tape, const Tensor& image) {
  Tensor patches = patchify(cfg_, image);
  Tensor pq = quantize_act(tape, patches, "patch_embed.x", patch_qx_);
  Tensor wq = quantize_weight(tape, patch_w_, patch_qw_);
  Tensor e = tape.add_rowvec(tape.matmul(pq, wq), patch_b_);
  Tensor x = tape.concat_rows({cls_token_, e});
  x = tape.add(x, pos_embed_);
  for (size_t l = 0; l < blocks_.size(); ++l) x = forward_block(tape, x, l);
  x = tape.layernorm(x, ln_f_gamma_, ln_f_beta_, kLnEps);
  Tensor cls = tape.slice_rows(x, 0, 1);
  Tensor cq = quantize_act(tape, cls, "classifier.x", cls_qx_);
  Tensor cw = quantize_weight(tape, cls_w_, cls_qw_);
  return tape.add_rowvec(tape.matmul(cq, cw), cls_b_);
}

Tensor QuantizedViT::forward_batch(Tape& tape,
                                   const std::vector<Tensor>& images) {
  if (images.empty()) throw ValueError("forward_batch: empty batch");
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const Tensor& img : images) rows.push_back(forward(tape, img));
  return tape.concat_rows(rows);
}

std::vector<std::pair<std::string, Tensor>> QuantizedViT::parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("cls_token", cls_token_);
  out.emplace_back("pos_embed", pos_embed_);
  out.emplace_back("patch_embed.weight", patch_w_);
  out.emplace_back("patch_embed.bias", patch_b_);
  for (size_t l = 0; l < blocks_.size(); ++l) {
    Block& blk = blocks_[l];
    const std::string b = fmt::format("block{}.", l);
    for (size_t i = 0; i < blk.msa.heads.size(); ++i) {
      MsaHead& h = blk.msa.heads[i];
      const std::string hb = b + fmt::format("msa.head{}.", i);
      out.emplace_back(hb + "w_q", h.w_q);
      out.emplace_back(hb + "b_q", h.b_q);
      out.emplace_back(hb + "w_k", h.w_k);
      out.emplace_back(hb + "b_k", h.b_k);
      out.emplace_back(hb + "w_v", h.w_v);
      out.emplace_back(hb + "b_v", h.b_v);
      out.emplace_back(hb + "w_o", h.w_o);
    }
    out.emplace_back(b + "msa.b_o", blk.msa.b_o);
    out.emplace_back(b + "ln1.gamma", blk.ln1_gamma);
    out.emplace_back(b + "ln1.beta", blk.ln1_beta);
    out.emplace_back(b + "mlp.w1", blk.mlp.w1);
    out.emplace_back(b + "mlp.b1", blk.mlp.b1);
    out.emplace_back(b + "mlp.w2", blk.mlp.w2);
    out.emplace_back(b + "mlp.b2", blk.mlp.b2);
    out.emplace_back(b + "ln2.gamma", blk.ln2_gamma);
    out.emplace_back(b + "ln2.beta", blk.ln2_beta);
  }
  out.emplace_back("ln_f.gamma", ln_f_gamma_);
  out.emplace_back("ln_f.beta", ln_f_beta_);
  out.emplace_back("classifier.weight", cls_w_);
  out.emplace_back("classifier.bias", cls_b_);
  return out;
}

std::vector<std::pair<std::string, const QuantizerState*>>
QuantizedViT::quantizers() const {
  std::vector<std::pair<std::string, const QuantizerState*>> out;
  out.emplace_back("patch_embed.x", &patch_qx_);
  out.emplace_back("patch_embed.w", &patch_qw_);
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    const std::string b = fmt::format("block{}.msa.", l);
    out.emplace_back(b + "x_in", &blk.msa.x_in);
    for (size_t i = 0; i < blk.msa.heads.size(); ++i) {
      const MsaHead& h = blk.msa.heads[i];
      const std::string hd = fmt::format("head{}", i);
      out.emplace_back(b + "w_q." + hd, &h.qw_q);
      out.emplace_back(b + "w_k." + hd, &h.qw_k);
      out.emplace_back(b + "w_v." + hd, &h.qw_v);
      out.emplace_back(b + "w_o." + hd, &h.qw_o);
      out.emplace_back(b + hd + ".q", &h.q_q);
      out.emplace_back(b + hd + ".k", &h.q_k);
      out.emplace_back(b + hd + ".v", &h.q_v);
      out.emplace_back(b + hd + ".attn", &h.q_attn);
      out.emplace_back(b + hd + ".out", &h.q_out);
    }
    const std::string m = fmt::format("block{}.mlp.", l);
    out.emplace_back(m + "x_in", &blk.mlp.x_in);
    out.emplace_back(m + "w1", &blk.mlp.qw1);
    out.emplace_back(m + "gelu", &blk.mlp.gelu_out);
    out.emplace_back(m + "w2", &blk.mlp.qw2);
  }
  out.emplace_back("classifier.x", &cls_qx_);
  out.emplace_back("classifier.w", &cls_qw_);
  return out;
}

std::vector<std::pair<std::string, QuantizerState*>> QuantizedViT::quantizers() {
  // The object itself is non-const here, so shedding the const added by the
  // const overload's traversal is well-defined.
  std::vector<std::pair<std::string, QuantizerState*>> out;
  for (auto& [name, q] : std::as_const(*this).quantizers())
    out.emplace_back(name, const_cast<QuantizerState*>(q));
  return out;
}

BitAllocation QuantizedViT::get_allocation() const {
  BitAllocation alloc;
  for (const auto& [name, q] : quantizers()) alloc[name] = active_bit(*q);
  return alloc;
}

void QuantizedViT::set_allocation(const BitAllocation& alloc) {
  auto quants = quantizers();
  if (alloc.size() != quants.size())
    throw ValueError(
        fmt::format("set_allocation: {} entries for {} quantizers",
                    alloc.size(), quants.size()));
  for (auto& [name, q] : quants) {
    auto it = alloc.find(name);
    if (it == alloc.end())
      throw ValueError("set_allocation: missing quantizer: " + name);
    if (it->second < kBitMin || it->second > kBitMax)
      throw ValueError("set_allocation: bit outside [2, 8] for " + name);
    q->frozen_bit = it->second;
  }
}

std::map<std::string, Tensor> QuantizedViT::weight_tensor_by_quantizer() {
  std::map<std::string, Tensor> out;
  out.emplace("patch_embed.w", patch_w_);
  for (size_t l = 0; l < blocks_.size(); ++l) {
    Block& blk = blocks_[l];
    const std::string b = fmt::format("block{}.msa.", l);
    for (size_t i = 0; i < blk.msa.heads.size(); ++i) {
      MsaHead& h = blk.msa.heads[i];
      const std::string hd = fmt::format("head{}", i);
      out.emplace(b + "w_q." + hd, h.w_q);
      out.emplace(b + "w_k." + hd, h.w_k);
      out.emplace(b + "w_v." + hd, h.w_v);
      out.emplace(b + "w_o." + hd, h.w_o);
    }
    const std::string m = fmt::format("block{}.mlp.", l);
    out.emplace(m + "w1", blk.mlp.w1);
    out.emplace(m + "w2", blk.mlp.w2);
  }
  out.emplace("classifier.w", cls_w_);
  return out;
}

std::uint64_t QuantizedViT::state_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto& self = const_cast<QuantizedViT&>(*this);
  for (const auto& [name, t] : self.parameters()) {
    h = fnv1a_bytes(name.data(), name.size(), h);
    h = fnv1a_doubles(t->data, h);
  }
  for (const auto& [name, q] : quantizers()) {
    h = fnv1a_bytes(name.data(), name.size(), h);
    h = fnv1a_doubles(q->b_tilde->data, h);
    h = fnv1a_doubles(q->scales->data, h);
    int frozen = q->frozen_bit ? *q->frozen_bit : -1;
    h = fnv1a_bytes(&frozen, sizeof(frozen), h);
    char sign = q->is_signed ? 1 : 0;
    h = fnv1a_bytes(&sign, sizeof(sign), h);
  }
  return h;
}

size_t QuantizedViT::expected_quantizer_count(const ModelConfig& cfg) {
  const size_t l = static_cast<size_t>(cfg.depth);
  const size_t h = static_cast<size_t>(cfg.heads);
  return l * (5 * h + 4 * h + 1) + l * 4 + 4;
}

}  // namespace qvit
