// SPDX-License-Identifier: Apache-2.0
#include "qvit/bitops.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "fmt/format.h"

namespace qvit {

std::vector<MatmulEntry> enumerate_matmuls(const ModelConfig& cfg) {
  cfg.validate();
  const double n = static_cast<double>(cfg.tokens());
  const double d = static_cast<double>(cfg.embed_dim);
  const double dh = static_cast<double>(cfg.head_dim());
  const double dm = static_cast<double>(cfg.mlp_dim);

  std::vector<MatmulEntry> out;
  out.push_back({"patch_embed",
                 static_cast<double>(cfg.num_patches()) * d *
                     static_cast<double>(cfg.patch_dim()),
                 "patch_embed.x", "patch_embed.w"});
  for (long l = 0; l < cfg.depth; ++l) {
    const std::string msa = fmt::format("block{}.msa.", l);
    for (long i = 0; i < cfg.heads; ++i) {
      const std::string head = fmt::format("head{}", i);
      for (const char* p : {"q", "k", "v"}) {
        out.push_back({msa + head + "." + p + "_proj", n * d * dh,
                       msa + "x_in", msa + "w_" + p + "." + head});
      }
      out.push_back({msa + head + ".qk", n * n * dh, msa + head + ".q",
                     msa + head + ".k"});
      out.push_back({msa + head + ".av", n * n * dh, msa + head + ".attn",
                     msa + head + ".v"});
      out.push_back({msa + head + ".out_proj", n * dh * d, msa + head + ".out",
                     msa + "w_o." + head});
    }
    const std::string mlp = fmt::format("block{}.mlp.", l);
    out.push_back({mlp + "fc1", n * d * dm, mlp + "x_in", mlp + "w1"});
    out.push_back({mlp + "fc2", n * dm * d, mlp + "gelu", mlp + "w2"});
  }
  out.push_back({"classifier", d * static_cast<double>(cfg.num_classes),
                 "classifier.x", "classifier.w"});
  return out;
}

std::vector<std::string> quantizer_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  std::set<std::string> seen;
  for (const auto& e : enumerate_matmuls(cfg)) {
    for (const std::string& q : {e.quant_a, e.quant_b}) {
      if (seen.insert(q).second) names.push_back(q);
    }
  }
  return names;
}

double matmul_bitops(double macs, double bits_a, double bits_b) {
  return macs * bits_a * bits_b;
}

BitOpsReport model_bitops(const ModelConfig& cfg,
                          const std::map<std::string, double>& bits,
                          bool continuous) {
  auto bit_of = [&](const std::string& name) -> double {
    auto it = bits.find(name);
    if (it == bits.end())
      throw ValueError("missing allocation entry: " + name);
    if (continuous) {
      return std::min(std::max(it->second, static_cast<double>(kBitMin)),
                      static_cast<double>(kBitMax));
    }
    return static_cast<double>(discretize_bit(it->second));
  };

  BitOpsReport report;
  for (const auto& e : enumerate_matmuls(cfg)) {
    BitOpsEntry entry;
    entry.name = e.name;
    entry.macs = e.macs;
    entry.quant_a = e.quant_a;
    entry.quant_b = e.quant_b;
    entry.bits_a = bit_of(e.quant_a);
    entry.bits_b = bit_of(e.quant_b);
    entry.bitops = matmul_bitops(e.macs, entry.bits_a, entry.bits_b);
    report.total_bitops += entry.bitops;
    report.entries.push_back(std::move(entry));
  }
  report.total_gbitops = report.total_bitops * 1e-9;
  return report;
}

BitOpsReport model_bitops(const ModelConfig& cfg, const BitAllocation& alloc) {
  std::map<std::string, double> bits;
  for (const auto& [name, bit] : alloc) bits.emplace(name, bit);
  return model_bitops(cfg, bits, /*continuous=*/false);
}

BitAllocation uniform_allocation(const ModelConfig& cfg, int n_bits) {
  if (n_bits < kBitMin || n_bits > kBitMax)
    throw ValueError("uniform_allocation: bits outside [2, 8]");
  BitAllocation alloc;
  for (const std::string& name : quantizer_names(cfg)) {
    bool first_or_last = name.starts_with("patch_embed.") ||
                         name.starts_with("classifier.");
    alloc[name] = first_or_last ? 8 : n_bits;
  }
  return alloc;
}

double uniform_budget(const ModelConfig& cfg, int n_bits) {
  return model_bitops(cfg, uniform_allocation(cfg, n_bits)).total_gbitops;
}

Tensor continuous_bitops(Tape& tape, const ModelConfig& cfg,
                         const std::map<std::string, Tensor>& b_tilde) {
  std::map<std::string, Tensor> clamped;
  auto clamped_bits = [&](const std::string& name) -> Tensor {
    auto hit = clamped.find(name);
    if (hit != clamped.end()) return hit->second;
    auto it = b_tilde.find(name);
    if (it == b_tilde.end())
      throw ValueError("missing allocation entry: " + name);
    Tensor c = tape.clamp(it->second, static_cast<double>(kBitMin),
                          static_cast<double>(kBitMax));
    clamped.emplace(name, c);
    return c;
  };

  // Accumulate in BitOPs and scale once at the end, mirroring the discrete
  // path so both agree bitwise when every bit-width is integer-valued.
  Tensor total;
  for (const auto& e : enumerate_matmuls(cfg)) {
    Tensor prod = tape.mul(clamped_bits(e.quant_a), clamped_bits(e.quant_b));
    Tensor term = tape.mul_scalar(prod, e.macs);
    total = total ? tape.add(total, term) : term;
  }
  return tape.mul_scalar(total, 1e-9);
}

Tensor penalty(Tape& tape, const Tensor& continuous_gbitops, double budget,
               double eta) {
  if (eta < 0.0) throw ValueError("penalty: eta must be >= 0");
  Tensor over = tape.relu(tape.add_scalar(continuous_gbitops, -budget));
  return tape.mul_scalar(tape.mul(over, over), eta);
}

Json BitOpsReport::to_json() const {
  Json j;
  j["total_bitops"] = total_bitops;
  j["total_gbitops"] = total_gbitops;
  if (budget_gbitops)
    j["budget_gbitops"] = *budget_gbitops;
  else
    j["budget_gbitops"] = nullptr;
  j["over_budget"] = over_budget;
  Json entries_json = Json::array();
  for (const auto& e : entries) {
    Json ej;
    ej["name"] = e.name;
    ej["macs"] = e.macs;
    ej["quant_a"] = e.quant_a;
    ej["bits_a"] = e.bits_a;
    ej["quant_b"] = e.quant_b;
    ej["bits_b"] = e.bits_b;
    ej["bitops"] = e.bitops;
    entries_json.push_back(std::move(ej));
  }
  j["entries"] = std::move(entries_json);
  return j;
}

std::string BitOpsReport::to_csv() const {
  std::ostringstream out;
  out << "name,macs,quant_a,bits_a,quant_b,bits_b,bitops\n";
  for (const auto& e : entries) {
    out << fmt::format("{},{:.0f},{},{:.17g},{},{:.17g},{:.17g}\n", e.name,
                       e.macs, e.quant_a, e.bits_a, e.quant_b, e.bits_b,
                       e.bitops);
  }
  return out.str();
}

}  // namespace qvit
