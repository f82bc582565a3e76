// SPDX-License-Identifier: Apache-2.0
#include "qvit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qvit {

namespace {

constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch");
}

void check_finite(const Tensor& t, const char* op) {
  if (!t->all_finite())
    throw ValueError(std::string(op) + ": non-finite input");
}

void accumulate(const Tensor& t, const std::vector<double>& g) {
  if (g.empty()) return;
  if (g.size() != t->numel())
    throw ShapeError("backward: gradient size mismatch");
  t->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
}

}  // namespace

bool TensorData::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) {
    if (d == 0) throw ShapeError("zero extent in shape");
    n *= d;
  }
  return n;
}

Tensor make_tensor(std::vector<size_t> shape, std::vector<double> data,
                   bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("make_tensor: data length does not match shape");
  auto t = std::make_shared<TensorData>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

Tensor zeros(std::vector<size_t> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor full(std::vector<size_t> shape, double value, bool requires_grad) {
  size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value),
                     requires_grad);
}

Tensor scalar(double value, bool requires_grad) {
  return make_tensor({1}, {value}, requires_grad);
}

Tensor Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn back) {
  if (recording_)
    nodes_.push_back(Node{std::move(inputs), output, std::move(back)});
  return output;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a->rank() != 2 || b->rank() != 2)
    throw ShapeError("matmul: operands must be 2D");
  size_t m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
  if (k != k2) throw ShapeError("matmul: inner dimensions do not match");
  auto out = zeros({m, n});
  const double* pa = a->data.data();
  const double* pb = b->data.data();
  double* pc = out->data.data();
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      double av = pa[i * k + p];
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return record({a, b}, out,
                [m, k, n](const std::vector<Tensor>& in, const Tensor&,
                          const std::vector<double>& g) {
                  const double* pa = in[0]->data.data();
                  const double* pb = in[1]->data.data();
                  std::vector<double> ga(m * k, 0.0), gb(k * n, 0.0);
                  for (size_t i = 0; i < m; ++i)
                    for (size_t p = 0; p < k; ++p) {
                      double s = 0.0;
                      const double* brow = pb + p * n;
                      const double* grow = g.data() + i * n;
                      for (size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                      ga[i * k + p] = s;
                    }
                  for (size_t i = 0; i < m; ++i)
                    for (size_t p = 0; p < k; ++p) {
                      double av = pa[i * k + p];
                      double* gbrow = gb.data() + p * n;
                      const double* grow = g.data() + i * n;
                      for (size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                  return std::vector<std::vector<double>>{std::move(ga),
                                                          std::move(gb)};
                });
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i)
    out->data[i] = a->data[i] + b->data[i];
  return record({a, b}, out,
                [](const std::vector<Tensor>&, const Tensor&,
                   const std::vector<double>& g) {
                  return std::vector<std::vector<double>>{g, g};
                });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i)
    out->data[i] = a->data[i] - b->data[i];
  return record({a, b}, out,
                [](const std::vector<Tensor>&, const Tensor&,
                   const std::vector<double>& g) {
                  std::vector<double> gb(g.size());
                  for (size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
                  return std::vector<std::vector<double>>{g, std::move(gb)};
                });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i)
    out->data[i] = a->data[i] * b->data[i];
  return record({a, b}, out,
                [](const std::vector<Tensor>& in, const Tensor&,
                   const std::vector<double>& g) {
                  std::vector<double> ga(g.size()), gb(g.size());
                  for (size_t i = 0; i < g.size(); ++i) {
                    ga[i] = g[i] * in[1]->data[i];
                    gb[i] = g[i] * in[0]->data[i];
                  }
                  return std::vector<std::vector<double>>{std::move(ga),
                                                          std::move(gb)};
                });
}

Tensor Tape::add_scalar(const Tensor& a, double s) {
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + s;
  return record({a}, out,
                [](const std::vector<Tensor>&, const Tensor&,
                   const std::vector<double>& g) {
                  return std::vector<std::vector<double>>{g};
                });
}

Tensor Tape::mul_scalar(const Tensor& a, double s) {
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * s;
  return record({a}, out,
                [s](const std::vector<Tensor>&, const Tensor&,
                    const std::vector<double>& g) {
                  std::vector<double> ga(g.size());
                  for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
                  return std::vector<std::vector<double>>{std::move(ga)};
                });
}

Tensor Tape::add_rowvec(const Tensor& x, const Tensor& v) {
  if (x->rank() != 2 || v->rank() != 1 || v->shape[0] != x->shape[1])
    throw ShapeError("add_rowvec: expected [m x n] plus [n]");
  size_t m = x->shape[0], n = x->shape[1];
  auto out = zeros(x->shape);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      out->data[i * n + j] = x->data[i * n + j] + v->data[j];
  return record({x, v}, out,
                [m, n](const std::vector<Tensor>&, const Tensor&,
                       const std::vector<double>& g) {
                  std::vector<double> gv(n, 0.0);
                  for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
                  return std::vector<std::vector<double>>{g, std::move(gv)};
                });
}

Tensor Tape::relu(const Tensor& a) {
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i)
    out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
  return record({a}, out,
                [](const std::vector<Tensor>& in, const Tensor&,
                   const std::vector<double>& g) {
                  std::vector<double> ga(g.size());
                  for (size_t i = 0; i < g.size(); ++i)
                    ga[i] = in[0]->data[i] > 0.0 ? g[i] : 0.0;
                  return std::vector<std::vector<double>>{std::move(ga)};
                });
}

Tensor Tape::clamp(const Tensor& a, double lo, double hi) {
  auto out = zeros(a->shape);
  for (size_t i = 0; i < a->numel(); ++i)
    out->data[i] = std::min(std::max(a->data[i], lo), hi);
  return record({a}, out,
                [lo, hi](const std::vector<Tensor>& in, const Tensor&,
                         const std::vector<double>& g) {
                  std::vector<double> ga(g.size());
                  for (size_t i = 0; i < g.size(); ++i) {
                    double v = in[0]->data[i];
                    ga[i] = (v >= lo && v <= hi) ? g[i] : 0.0;
                  }
                  return std::vector<std::vector<double>>{std::move(ga)};
                });
}

Tensor Tape::sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a->data) s += v;
  auto out = scalar(s);
  return record({a}, out,
                [](const std::vector<Tensor>& in, const Tensor&,
                   const std::vector<double>& g) {
                  return std::vector<std::vector<double>>{
                      std::vector<double>(in[0]->numel(), g[0])};
                });
}

Tensor Tape::mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a->data) s += v;
  size_t n = a->numel();
  auto out = scalar(s / static_cast<double>(n));
  return record({a}, out,
                [n](const std::vector<Tensor>&, const Tensor&,
                    const std::vector<double>& g) {
                  return std::vector<std::vector<double>>{std::vector<double>(
                      n, g[0] / static_cast<double>(n))};
                });
}

Tensor Tape::reshape(const Tensor& a, std::vector<size_t> shape) {
  if (shape_numel(shape) != a->numel())
    throw ShapeError("reshape: element count mismatch");
  auto out = make_tensor(std::move(shape), a->data);
  return record({a}, out,
                [](const std::vector<Tensor>&, const Tensor&,
                   const std::vector<double>& g) {
                  return std::vector<std::vector<double>>{g};
                });
}

Tensor Tape::transpose_last2(const Tensor& a) {
  if (a->rank() != 2) throw ShapeError("transpose_last2: expected 2D tensor");
  size_t m = a->shape[0], n = a->shape[1];
  auto out = zeros({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out->data[j * m + i] = a->data[i * n + j];
  return record({a}, out,
                [m, n](const std::vector<Tensor>&, const Tensor&,
                       const std::vector<double>& g) {
                  std::vector<double> ga(m * n);
                  for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j)
                      ga[i * n + j] = g[j * m + i];
                  return std::vector<std::vector<double>>{std::move(ga)};
                });
}

Tensor Tape::concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no parts");
  size_t m = parts[0]->rows();
  size_t total = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->shape[0] != m)
      throw ShapeError("concat_lastdim: row counts differ");
    total += p->shape[1];
  }
  auto out = zeros({m, total});
  size_t off = 0;
  for (const auto& p : parts) {
    size_t n = p->shape[1];
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j)
        out->data[i * total + off + j] = p->data[i * n + j];
    off += n;
  }
  return record(parts, out,
                [m, total](const std::vector<Tensor>& in, const Tensor&,
                           const std::vector<double>& g) {
                  std::vector<std::vector<double>> gs;
                  gs.reserve(in.size());
                  size_t off = 0;
                  for (const auto& p : in) {
                    size_t n = p->shape[1];
                    std::vector<double> gp(m * n);
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < n; ++j)
                        gp[i * n + j] = g[i * total + off + j];
                    off += n;
                    gs.push_back(std::move(gp));
                  }
                  return gs;
                });
}

std::vector<Tensor> Tape::split_heads(const Tensor& x, size_t heads) {
  if (x->rank() != 2) throw ShapeError("split_heads: expected 2D tensor");
  size_t m = x->shape[0], n = x->shape[1];
  if (heads == 0 || n % heads != 0)
    throw ShapeError("split_heads: last dim not divisible by head count");
  size_t dh = n / heads;
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (size_t h = 0; h < heads; ++h) {
    auto out = zeros({m, dh});
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < dh; ++j)
        out->data[i * dh + j] = x->data[i * n + h * dh + j];
    record({x}, out,
           [m, n, dh, h](const std::vector<Tensor>&, const Tensor&,
                         const std::vector<double>& g) {
             std::vector<double> gx(m * n, 0.0);
             for (size_t i = 0; i < m; ++i)
               for (size_t j = 0; j < dh; ++j)
                 gx[i * n + h * dh + j] = g[i * dh + j];
             return std::vector<std::vector<double>>{std::move(gx)};
           });
    outs.push_back(out);
  }
  return outs;
}

Tensor Tape::merge_heads(const std::vector<Tensor>& heads) {
  return concat_lastdim(heads);
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  size_t n = parts[0]->cols();
  size_t rows = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->shape[1] != n)
      throw ShapeError("concat_rows: column counts differ");
    rows += p->shape[0];
  }
  auto out = zeros({rows, n});
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
    off += p->numel();
  }
  return record(parts, out,
                [](const std::vector<Tensor>& in, const Tensor&,
                   const std::vector<double>& g) {
                  std::vector<std::vector<double>> gs;
                  gs.reserve(in.size());
                  size_t off = 0;
                  for (const auto& p : in) {
                    gs.emplace_back(g.begin() + off,
                                    g.begin() + off + p->numel());
                    off += p->numel();
                  }
                  return gs;
                });
}

Tensor Tape::slice_rows(const Tensor& x, size_t begin, size_t count) {
  if (x->rank() != 2) throw ShapeError("slice_rows: expected 2D tensor");
  size_t m = x->shape[0], n = x->shape[1];
  if (begin + count > m) throw ShapeError("slice_rows: range out of bounds");
  auto out = zeros({count, n});
  std::copy(x->data.begin() + begin * n, x->data.begin() + (begin + count) * n,
            out->data.begin());
  return record({x}, out,
                [m, n, begin, count](const std::vector<Tensor>&, const Tensor&,
                                     const std::vector<double>& g) {
                  std::vector<double> gx(m * n, 0.0);
                  std::copy(g.begin(), g.end(), gx.begin() + begin * n);
                  return std::vector<std::vector<double>>{std::move(gx)};
                });
}

Tensor Tape::softmax_lastdim(const Tensor& x) {
  check_finite(x, "softmax_lastdim");
  size_t n = x->rank() == 0 ? 1 : x->shape.back();
  if (n < 1) throw ShapeError("softmax_lastdim: empty last dim");
  size_t rows = x->numel() / n;
  auto out = zeros(x->shape);
  for (size_t r = 0; r < rows; ++r) {
    const double* xi = x->data.data() + r * n;
    double* yi = out->data.data() + r * n;
    double mx = xi[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double denom = 0.0;
    for (size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      denom += yi[j];
    }
    for (size_t j = 0; j < n; ++j) yi[j] /= denom;
  }
  return record({x}, out,
                [n, rows](const std::vector<Tensor>&, const Tensor& out,
                          const std::vector<double>& g) {
                  std::vector<double> gx(g.size());
                  for (size_t r = 0; r < rows; ++r) {
                    const double* y = out->data.data() + r * n;
                    const double* gi = g.data() + r * n;
                    double dot = 0.0;
                    for (size_t j = 0; j < n; ++j) dot += gi[j] * y[j];
                    for (size_t j = 0; j < n; ++j)
                      gx[r * n + j] = y[j] * (gi[j] - dot);
                  }
                  return std::vector<std::vector<double>>{std::move(gx)};
                });
}

Tensor Tape::gelu(const Tensor& x) {
  auto out = zeros(x->shape);
  for (size_t i = 0; i < x->numel(); ++i) {
    double v = x->data[i];
    out->data[i] = v * 0.5 * std::erfc(-v * kInvSqrt2);
  }
  return record({x}, out,
                [](const std::vector<Tensor>& in, const Tensor&,
                   const std::vector<double>& g) {
                  std::vector<double> gx(g.size());
                  for (size_t i = 0; i < g.size(); ++i) {
                    double v = in[0]->data[i];
                    double cdf = 0.5 * std::erfc(-v * kInvSqrt2);
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    gx[i] = g[i] * (cdf + v * pdf);
                  }
                  return std::vector<std::vector<double>>{std::move(gx)};
                });
}

Tensor Tape::layernorm(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps) {
  size_t n = x->shape.back();
  if (gamma->numel() != n || beta->numel() != n)
    throw ShapeError("layernorm: gamma/beta must match last dim");
  size_t rows = x->numel() / n;
  auto out = zeros(x->shape);
  // Normalized values are needed by backward; cache them by value.
  auto xhat = std::make_shared<std::vector<double>>(x->numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* xi = x->data.data() + r * n;
    double mu = 0.0;
    for (size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (size_t j = 0; j < n; ++j) {
      double h = (xi[j] - mu) * istd;
      (*xhat)[r * n + j] = h;
      out->data[r * n + j] = gamma->data[j] * h + beta->data[j];
    }
  }
  return record(
      {x, gamma, beta}, out,
      [n, rows, xhat, inv_std](const std::vector<Tensor>& in, const Tensor&,
                               const std::vector<double>& g) {
        const auto& gamma = in[1]->data;
        std::vector<double> gx(rows * n), ggamma(n, 0.0), gbeta(n, 0.0);
        for (size_t r = 0; r < rows; ++r) {
          const double* gi = g.data() + r * n;
          const double* h = xhat->data() + r * n;
          double istd = (*inv_std)[r];
          double mean_gh = 0.0, mean_ghh = 0.0;
          for (size_t j = 0; j < n; ++j) {
            double gh = gi[j] * gamma[j];
            mean_gh += gh;
            mean_ghh += gh * h[j];
          }
          mean_gh /= static_cast<double>(n);
          mean_ghh /= static_cast<double>(n);
          for (size_t j = 0; j < n; ++j) {
            double gh = gi[j] * gamma[j];
            gx[r * n + j] = istd * (gh - mean_gh - h[j] * mean_ghh);
            ggamma[j] += gi[j] * h[j];
            gbeta[j] += gi[j];
          }
        }
        return std::vector<std::vector<double>>{
            std::move(gx), std::move(ggamma), std::move(gbeta)};
      });
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits->rank() != 2) throw ShapeError("cross_entropy: logits must be 2D");
  size_t b = logits->shape[0], c = logits->shape[1];
  if (labels.size() != b)
    throw ShapeError("cross_entropy: label count does not match batch");
  for (int l : labels)
    if (l < 0 || static_cast<size_t>(l) >= c)
      throw ValueError("cross_entropy: label out of range");
  auto probs = std::make_shared<std::vector<double>>(b * c);
  double loss = 0.0;
  for (size_t i = 0; i < b; ++i) {
    const double* z = logits->data.data() + i * c;
    double mx = z[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    double denom = 0.0;
    for (size_t j = 0; j < c; ++j) denom += std::exp(z[j] - mx);
    double lse = mx + std::log(denom);
    loss += lse - z[labels[i]];
    for (size_t j = 0; j < c; ++j)
      (*probs)[i * c + j] = std::exp(z[j] - lse);
  }
  auto out = scalar(loss / static_cast<double>(b));
  return record({logits}, out,
                [b, c, probs, labels](const std::vector<Tensor>&, const Tensor&,
                                      const std::vector<double>& g) {
                  std::vector<double> gz(b * c);
                  double scale = g[0] / static_cast<double>(b);
                  for (size_t i = 0; i < b; ++i) {
                    for (size_t j = 0; j < c; ++j)
                      gz[i * c + j] = scale * (*probs)[i * c + j];
                    gz[i * c + labels[i]] -= scale;
                  }
                  return std::vector<std::vector<double>>{std::move(gz)};
                });
}

Tensor Tape::custom(std::vector<Tensor> inputs, const ForwardFn& forward_fn,
                    BackwardFn backward_fn) {
  Tensor out = forward_fn(inputs);
  size_t arity = inputs.size();
  BackwardFn checked = [arity, fn = std::move(backward_fn)](
                           const std::vector<Tensor>& in, const Tensor& out,
                           const std::vector<double>& g) {
    auto gs = fn(in, out, g);
    if (gs.size() != arity)
      throw ShapeError("custom node: backward_fn arity mismatch");
    return gs;
  };
  return record(std::move(inputs), out, std::move(checked));
}

void Tape::backward(const Tensor& loss) {
  if (!recording_) throw Error("backward: tape was not recording");
  if (backward_done_)
    throw Error("backward: called twice without re-recording");
  if (loss->numel() != 1) throw ShapeError("backward: loss must be scalar");
  backward_done_ = true;
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (node.output->grad.empty()) continue;  // not on the loss path
    auto gs = node.back(node.inputs, node.output, node.output->grad);
    for (size_t i = 0; i < node.inputs.size(); ++i)
      accumulate(node.inputs[i], gs[i]);
  }
}

}  // namespace qvit
