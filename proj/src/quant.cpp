// SPDX-License-Identifier: Apache-2.0
#include "qvit/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qvit {

namespace {

constexpr double kLn2 = std::numbers::ln2;

double fq_scalar(double x, double alpha, long q_min, long q_max) {
  double v = x / alpha;
  double c = std::min(std::max(v, -static_cast<double>(q_min)),
                      static_cast<double>(q_max));
  return alpha * round_even(c);
}

}  // namespace

const char* role_name(QuantRole role) {
  switch (role) {
    case QuantRole::kWeight: return "weight";
    case QuantRole::kActivation: return "activation";
    case QuantRole::kAttentionScore: return "attention_score";
    case QuantRole::kHeadOutput: return "head_output";
    case QuantRole::kQEmbed: return "q_embed";
    case QuantRole::kKEmbed: return "k_embed";
    case QuantRole::kVEmbed: return "v_embed";
  }
  return "unknown";
}

QuantRole role_from_name(const std::string& name) {
  if (name == "weight") return QuantRole::kWeight;
  if (name == "activation") return QuantRole::kActivation;
  if (name == "attention_score") return QuantRole::kAttentionScore;
  if (name == "head_output") return QuantRole::kHeadOutput;
  if (name == "q_embed") return QuantRole::kQEmbed;
  if (name == "k_embed") return QuantRole::kKEmbed;
  if (name == "v_embed") return QuantRole::kVEmbed;
  throw ValueError("unknown quantizer role: " + name);
}

bool default_signedness(QuantRole role) {
  return role != QuantRole::kAttentionScore;
}

QuantizerState make_quantizer(QuantRole role, double b_tilde_init) {
  QuantizerState q;
  q.b_tilde = scalar(b_tilde_init, /*requires_grad=*/true);
  q.scales = full({static_cast<size_t>(kNumCandidateBits)}, 1.0,
                  /*requires_grad=*/true);
  q.role = role;
  q.is_signed = default_signedness(role);
  return q;
}

int discretize_bit(double b_tilde) {
  if (!std::isfinite(b_tilde))
    throw ValueError("discretize_bit: non-finite bit-width");
  double c = std::min(std::max(b_tilde, static_cast<double>(kBitMin)),
                      static_cast<double>(kBitMax));
  return static_cast<int>(round_even(c));
}

QuantLevels levels(int bit, bool is_signed) {
  if (bit < kBitMin || bit > kBitMax)
    throw ValueError("levels: bit outside [2, 8]");
  QuantLevels l;
  if (is_signed) {
    l.q_min = 1L << (bit - 1);
    l.q_max = (1L << (bit - 1)) - 1;
  } else {
    l.q_min = 0;
    l.q_max = (1L << bit) - 1;
  }
  return l;
}

int active_bit(const QuantizerState& state) {
  if (state.frozen_bit) return *state.frozen_bit;
  return discretize_bit(state.b_tilde->item());
}

Tensor select_scale(Tape& tape, const QuantizerState& state) {
  int bit = active_bit(state);
  size_t idx = static_cast<size_t>(bit - kBitMin);
  return tape.custom(
      {state.scales},
      [idx](const std::vector<Tensor>& in) {
        return scalar(in[0]->data[idx]);
      },
      [idx](const std::vector<Tensor>& in, const Tensor&,
            const std::vector<double>& g) {
        std::vector<double> gs(in[0]->numel(), 0.0);
        gs[idx] = g[0];
        return std::vector<std::vector<double>>{std::move(gs)};
      });
}

Tensor fake_quantize(Tape& tape, const Tensor& x, const QuantizerState& state) {
  if (!x->all_finite()) throw ValueError("fake_quantize: non-finite input");
  Tensor alpha_t = select_scale(tape, state);
  double alpha = alpha_t->item();
  if (!(alpha > 0.0)) throw ValueError("fake_quantize: non-positive scale");

  int bit = active_bit(state);
  QuantLevels lv = levels(bit, state.is_signed);
  bool frozen = state.frozen_bit.has_value();
  bool is_signed = state.is_signed;
  double b_tilde = state.b_tilde->item();
  double grad_scale =
      1.0 / std::sqrt(static_cast<double>(x->numel()) *
                      static_cast<double>(lv.q_max));

  std::vector<Tensor> inputs = {x, alpha_t};
  if (!frozen) inputs.push_back(state.b_tilde);

  auto forward = [alpha, lv](const std::vector<Tensor>& in) {
    const Tensor& x = in[0];
    auto out = zeros(x->shape);
    for (size_t i = 0; i < x->numel(); ++i)
      out->data[i] = fq_scalar(x->data[i], alpha, lv.q_min, lv.q_max);
    return out;
  };

  auto backward = [alpha, lv, frozen, is_signed, b_tilde, bit, grad_scale](
                      const std::vector<Tensor>& in, const Tensor&,
                      const std::vector<double>& g) {
    const Tensor& x = in[0];
    double lo = -static_cast<double>(lv.q_min);
    double hi = static_cast<double>(lv.q_max);
    std::vector<double> gx(g.size(), 0.0);
    double galpha = 0.0;
    double gbit = 0.0;
    // Per-element clip-boundary derivatives of x_hat in b, at the active bit.
    double d_below = is_signed ? -alpha * kLn2 * std::pow(2.0, bit - 1) : 0.0;
    double d_above = alpha * kLn2 *
                     (is_signed ? std::pow(2.0, bit - 1) : std::pow(2.0, bit));
    for (size_t i = 0; i < g.size(); ++i) {
      double v = x->data[i] / alpha;
      if (v < lo) {
        galpha += g[i] * lo;
        gbit += g[i] * d_below;
      } else if (v > hi) {
        galpha += g[i] * hi;
        gbit += g[i] * d_above;
      } else {
        gx[i] = g[i];
        galpha += g[i] * (round_even(v) - v);
      }
    }
    std::vector<std::vector<double>> gs;
    gs.push_back(std::move(gx));
    gs.push_back({galpha * grad_scale});
    if (!frozen) {
      bool pass = b_tilde > static_cast<double>(kBitMin) &&
                  b_tilde < static_cast<double>(kBitMax);
      gs.push_back({pass ? gbit : 0.0});
    }
    return gs;
  };

  return tape.custom(std::move(inputs), forward, std::move(backward));
}

double mse_init_scale(std::span<const double> samples, int bit, bool is_signed) {
  if (samples.empty()) throw ValueError("mse_init_scale: empty sample");
  double m = 0.0;
  for (double v : samples) m = std::max(m, std::abs(v));
  if (m == 0.0) throw ValueError("mse_init_scale: all-zero sample");

  QuantLevels lv = levels(bit, is_signed);
  double lo = m / std::pow(2.0, bit + 2);
  double hi = 2.0 * m / static_cast<double>(lv.q_max);
  double ratio = hi / lo;
  constexpr int kGridSize = 128;

  double best_alpha = lo;
  double best_err = std::numeric_limits<double>::infinity();
  for (int k = 0; k < kGridSize; ++k) {
    double alpha = lo * std::pow(ratio, static_cast<double>(k) /
                                            static_cast<double>(kGridSize - 1));
    double err = 0.0;
    for (double v : samples) {
      double d = v - fq_scalar(v, alpha, lv.q_min, lv.q_max);
      err += d * d;
    }
    if (err < best_err) {
      best_err = err;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

void mse_init_all_scales(QuantizerState& state, std::span<const double> samples) {
  for (int bit = kBitMin; bit <= kBitMax; ++bit)
    state.scales->data[bit - kBitMin] =
        mse_init_scale(samples, bit, state.is_signed);
}

}  // namespace qvit
