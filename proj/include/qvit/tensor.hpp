// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qvit/common.hpp"

namespace qvit {

struct TensorData;
using Tensor = std::shared_ptr<TensorData>;

// Dense row-major f64 buffer. `grad` is empty until backward materializes it.
struct TensorData {
  std::vector<size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  size_t numel() const { return data.size(); }
  size_t rank() const { return shape.size(); }

  // 2D accessors; most model tensors are matrices or vectors.
  size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }
  double& at(size_t r, size_t c) { return data[r * cols() + c]; }
  double at(size_t r, size_t c) const { return data[r * cols() + c]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return data[0];
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { grad.clear(); }
  bool all_finite() const;
};

size_t shape_numel(const std::vector<size_t>& shape);

Tensor make_tensor(std::vector<size_t> shape, std::vector<double> data,
                   bool requires_grad = false);
Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
Tensor full(std::vector<size_t> shape, double value, bool requires_grad = false);
Tensor scalar(double value, bool requires_grad = false);

// Reverse-mode tape. Ops record a node per call; backward replays the node
// list once in reverse, accumulating in a fixed order so gradients are
// bit-reproducible. Recording is single-threaded by contract.
//
// A non-recording tape computes forward values only (used for evaluation).
class Tape {
 public:
  using BackwardFn = std::function<std::vector<std::vector<double>>(
      const std::vector<Tensor>& inputs, const Tensor& output,
      const std::vector<double>& out_grad)>;
  using ForwardFn = std::function<Tensor(const std::vector<Tensor>& inputs)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& a, double s);
  Tensor mul_scalar(const Tensor& a, double s);
  Tensor add_rowvec(const Tensor& x, const Tensor& v);
  Tensor relu(const Tensor& a);
  // Pass-through gradient on [lo, hi] inclusive, zero outside.
  Tensor clamp(const Tensor& a, double lo, double hi);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor reshape(const Tensor& a, std::vector<size_t> shape);
  Tensor transpose_last2(const Tensor& a);
  Tensor concat_lastdim(const std::vector<Tensor>& parts);
  std::vector<Tensor> split_heads(const Tensor& x, size_t heads);
  Tensor merge_heads(const std::vector<Tensor>& heads);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor slice_rows(const Tensor& x, size_t begin, size_t count);
  Tensor softmax_lastdim(const Tensor& x);
  Tensor gelu(const Tensor& x);
  Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   double eps);
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

  // Custom-gradient node: forward_fn computes the output (opaque to the
  // tape), backward_fn supplies one gradient buffer per input. STE
  // surrogates plug in here.
  Tensor custom(std::vector<Tensor> inputs, const ForwardFn& forward_fn,
                BackwardFn backward_fn);

  // Populates grad on everything reachable from loss. One shot per recording.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn back;
  };

  Tensor record(std::vector<Tensor> inputs, Tensor output, BackwardFn back);

  std::vector<Node> nodes_;
  bool recording_;
  bool backward_done_ = false;
};

}  // namespace qvit
