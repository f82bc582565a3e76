// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "qvit/rng.hpp"
#include "qvit/tensor.hpp"

using namespace qvit;

TEST_CASE("matmul: identity and reference values") {
  Tape tape;
  auto eye = make_tensor({2, 2}, {1, 0, 0, 1});
  auto a = make_tensor({2, 2}, {1, 2, 3, 4});
  auto c = tape.matmul(eye, a);
  CHECK(c->data == a->data);

  // Random product must equal the triple-loop reference bitwise: both sides
  // accumulate over the inner dimension in increasing order.
  Rng rng(11);
  auto x = zeros({3, 4});
  auto y = zeros({4, 2});
  oracle::fill_normal(x, rng);
  oracle::fill_normal(y, rng);
  auto z = tape.matmul(x, y);
  CHECK(z->data == oracle::naive_matmul(x->data, 3, 4, y->data, 2));

  CHECK_THROWS_AS(tape.matmul(x, x), ShapeError);
}

TEST_CASE("matmul: backward on the identity case and finite differences") {
  {
    Tape tape;
    auto a = make_tensor({2, 2}, {1, 0, 0, 1}, true);
    auto b = make_tensor({2, 2}, {5, 6, 7, 8}, true);
    auto loss = tape.sum(tape.matmul(a, b));  // upstream grad all ones
    tape.backward(loss);
    // grad_a = ones . b^T : row r, col c -> sum of b row c.
    CHECK(a->grad == std::vector<double>{11, 15, 11, 15});
    // grad_b = a^T . ones : a is the identity, so all ones.
    CHECK(b->grad == std::vector<double>{1, 1, 1, 1});
  }

  Rng rng(12);
  auto x = zeros({3, 4}, true);
  auto y = zeros({4, 2}, true);
  oracle::fill_normal(x, rng);
  oracle::fill_normal(y, rng);
  double err = oracle::max_fd_error({x, y}, [&](Tape& t) {
    return oracle::weighted_readout(t, t.matmul(x, y));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax: uniform rows, large-logit stability, gradient") {
  Tape tape;
  auto flat = make_tensor({1, 4}, {0, 0, 0, 0});
  auto s = tape.softmax_lastdim(flat);
  for (double v : s->data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  auto big = make_tensor({1, 2}, {1000, 0});
  auto sb = tape.softmax_lastdim(big);
  CHECK(std::isfinite(sb->data[0]));
  CHECK(sb->data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sb->data[1] >= 0.0);
  CHECK(sb->data[1] < 1e-300);

  auto bad = make_tensor({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(tape.softmax_lastdim(bad), ValueError);

  Rng rng(13);
  auto x = zeros({2, 5}, true);
  oracle::fill_normal(x, rng);
  double err = oracle::max_fd_error({x}, [&](Tape& t) {
    return oracle::weighted_readout(t, t.softmax_lastdim(x));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("gelu: fixed points, saturation, gradient at smooth points") {
  Tape tape;
  auto x = make_tensor({3}, {0.0, 10.0, -10.0});
  auto y = tape.gelu(x);
  CHECK(y->data[0] == 0.0);
  CHECK(std::abs(y->data[1] - 10.0) < 1e-12);
  CHECK(std::abs(y->data[2]) < 1e-12);

  auto pts = make_tensor({4}, {-2.0, -0.5, 0.3, 1.7}, true);
  double err = oracle::max_fd_error({pts}, [&](Tape& t) {
    return t.sum(t.gelu(pts));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("layernorm: zero variance, normalized passthrough, gradient") {
  Tape tape;
  auto g1 = make_tensor({3}, {1, 1, 1});
  auto b0 = make_tensor({3}, {0, 0, 0});
  auto constant = make_tensor({1, 3}, {3, 3, 3});
  auto out = tape.layernorm(constant, g1, b0, 1e-6);
  for (double v : out->data) CHECK(v == 0.0);

  auto g2 = make_tensor({2}, {1, 1});
  auto b2 = make_tensor({2}, {0, 0});
  auto pm = make_tensor({1, 2}, {1, -1});
  auto norm = tape.layernorm(pm, g2, b2, 1e-12);
  CHECK(norm->data[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(norm->data[1] == doctest::Approx(-1.0).epsilon(1e-9));

  Rng rng(14);
  auto x = zeros({2, 5}, true);
  auto gamma = zeros({5}, true);
  auto beta = zeros({5}, true);
  oracle::fill_normal(x, rng);
  oracle::fill_uniform(gamma, rng, 0.5, 1.5);
  oracle::fill_normal(beta, rng, 0.1);
  double err = oracle::max_fd_error({x, gamma, beta}, [&](Tape& t) {
    return oracle::weighted_readout(t, t.layernorm(x, gamma, beta, 1e-6));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("head split and merge invert each other") {
  Tape tape;
  Rng rng(15);
  auto x = zeros({4, 6}, true);
  oracle::fill_normal(x, rng);
  auto heads = tape.split_heads(x, 2);
  REQUIRE(heads.size() == 2);
  CHECK(heads[0]->shape == std::vector<size_t>{4, 3});
  CHECK(heads[1]->shape == std::vector<size_t>{4, 3});
  auto back = tape.merge_heads(heads);
  CHECK(back->shape == x->shape);
  CHECK(back->data == x->data);

  // Gradient routes each slice back to its columns, untouched.
  auto loss = tape.sum(tape.mul_scalar(heads[0], 2.0));
  tape.backward(loss);
  for (size_t r = 0; r < 4; ++r)
    for (size_t c = 0; c < 6; ++c)
      CHECK(x->grad[r * 6 + c] == (c < 3 ? 2.0 : 0.0));

  CHECK_THROWS_AS(tape.split_heads(x, 4), ShapeError);
}

TEST_CASE("concat, transpose, reshape, row slicing obey their shape laws") {
  Tape tape;
  Rng rng(16);
  auto a = zeros({3, 2});
  auto b = zeros({3, 5});
  oracle::fill_normal(a, rng);
  oracle::fill_normal(b, rng);
  auto cat = tape.concat_lastdim({a, b});
  CHECK(cat->shape == std::vector<size_t>{3, 7});

  auto t = tape.transpose_last2(a);
  CHECK(t->shape == std::vector<size_t>{2, 3});
  auto tt = tape.transpose_last2(t);
  CHECK(tt->data == a->data);

  auto r = tape.reshape(a, {2, 3});
  CHECK(r->data == a->data);
  CHECK_THROWS_AS(tape.reshape(a, {4, 2}), ShapeError);

  auto rows = tape.concat_rows({a, a});
  CHECK(rows->shape == std::vector<size_t>{6, 2});
  auto mid = tape.slice_rows(rows, 3, 3);
  CHECK(mid->data == a->data);
  CHECK_THROWS_AS(tape.slice_rows(rows, 5, 3), ShapeError);
}

TEST_CASE("elementwise arithmetic: values and finite differences") {
  Rng rng(17);
  auto a = zeros({2, 3}, true);
  auto b = zeros({2, 3}, true);
  auto v = zeros({3}, true);
  oracle::fill_normal(a, rng);
  oracle::fill_normal(b, rng);
  oracle::fill_normal(v, rng);

  {
    Tape tape;
    auto sum = tape.add(a, b);
    for (size_t i = 0; i < sum->numel(); ++i)
      CHECK(sum->data[i] == a->data[i] + b->data[i]);
    auto wrong = zeros({3, 2});
    CHECK_THROWS_AS(tape.add(a, wrong), ShapeError);
  }
  {
    Tape tape;
    auto br = tape.add_rowvec(a, v);
    for (size_t r = 0; r < 2; ++r)
      for (size_t c = 0; c < 3; ++c)
        CHECK(br->at(r, c) == a->at(r, c) + v->data[c]);
  }

  double err = oracle::max_fd_error({a, b, v}, [&](Tape& t) {
    auto mixed = t.mul(t.add(a, b), t.sub(a, b));
    auto shifted = t.add_rowvec(mixed, v);
    auto scaled = t.add_scalar(t.mul_scalar(shifted, 0.7), 0.3);
    return t.add(t.mean(scaled), t.mul_scalar(t.sum(scaled), 0.01));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("relu and clamp: boundary gradient conventions") {
  Tape tape;
  auto x = make_tensor({5}, {-1.0, 0.0, 2.0, 7.0, 9.0}, true);
  auto r = tape.relu(x);
  CHECK(r->data == std::vector<double>{0, 0, 2, 7, 9});
  auto c = tape.clamp(r, 0.0, 7.0);
  CHECK(c->data == std::vector<double>{0, 0, 2, 7, 7});
  tape.backward(tape.sum(c));
  // relu zeroes the gradient at and below zero; clamp passes gradient on the
  // closed interval, so the element sitting exactly on the upper bound still
  // receives it.
  CHECK(x->grad == std::vector<double>{0, 0, 1, 1, 0});
}

TEST_CASE("cross entropy: uniform logits, margin limit, bad labels, gradient") {
  {
    Tape tape;
    auto logits = zeros({2, 10});
    auto loss = tape.cross_entropy(logits, {3, 7});
    CHECK(loss->item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  }
  {
    // Raising the correct-class margin drives the loss toward zero.
    double prev = 1e300;
    for (double margin : {5.0, 10.0, 30.0}) {
      Tape tape;
      auto logits = zeros({1, 4});
      logits->data[2] = margin;
      double loss = tape.cross_entropy(logits, {2})->item();
      CHECK(loss < prev);
      prev = loss;
    }
    CHECK(prev < 1e-12);
  }
  {
    Tape tape;
    auto logits = zeros({2, 4});
    CHECK_THROWS_AS(tape.cross_entropy(logits, {0, 4}), ValueError);
    CHECK_THROWS_AS(tape.cross_entropy(logits, {-1, 0}), ValueError);
    CHECK_THROWS_AS(tape.cross_entropy(logits, {0}), ShapeError);
  }

  Rng rng(18);
  auto logits = zeros({3, 5}, true);
  oracle::fill_normal(logits, rng);
  std::vector<int> labels{1, 4, 0};
  double err = oracle::max_fd_error({logits}, [&](Tape& t) {
    return t.cross_entropy(logits, labels);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("custom nodes: no-op, round-with-passthrough, surrogate chain") {
  {
    Tape tape;
    auto x = make_tensor({3}, {1.5, -2.5, 0.25}, true);
    auto y = tape.custom(
        {x}, [](const std::vector<Tensor>& in) {
          return make_tensor(in[0]->shape, in[0]->data);
        },
        [](const std::vector<Tensor>&, const Tensor&,
           const std::vector<double>& g) {
          return std::vector<std::vector<double>>{g};
        });
    CHECK(y->data == x->data);
    tape.backward(tape.sum(tape.mul_scalar(y, 3.0)));
    CHECK(x->grad == std::vector<double>{3, 3, 3});
  }
  {
    // Round forward, identity backward: integer outputs, gradient unchanged.
    Tape tape;
    auto x = make_tensor({3}, {1.4, -2.6, 0.5}, true);
    auto y = tape.custom(
        {x}, [](const std::vector<Tensor>& in) {
          auto out = zeros(in[0]->shape);
          for (size_t i = 0; i < out->numel(); ++i)
            out->data[i] = std::nearbyint(in[0]->data[i]);
          return out;
        },
        [](const std::vector<Tensor>&, const Tensor&,
           const std::vector<double>& g) {
          return std::vector<std::vector<double>>{g};
        });
    CHECK(y->data == std::vector<double>{1, -3, 0});
    tape.backward(tape.sum(y));
    CHECK(x->grad == std::vector<double>{1, 1, 1});
  }
  {
    // Two stacked surrogates multiply: the first claims d/dx = 3, the second
    // d/dy = 7, so the leaf must see 21 regardless of the forward values.
    Tape tape;
    auto x = make_tensor({2}, {1.0, 2.0}, true);
    auto first = tape.custom(
        {x}, [&](const std::vector<Tensor>& in) {
          auto out = zeros(in[0]->shape);
          for (size_t i = 0; i < out->numel(); ++i)
            out->data[i] = 2.0 * in[0]->data[i];
          return out;
        },
        [](const std::vector<Tensor>&, const Tensor&,
           const std::vector<double>& g) {
          std::vector<double> gx(g.size());
          for (size_t i = 0; i < g.size(); ++i) gx[i] = 3.0 * g[i];
          return std::vector<std::vector<double>>{gx};
        });
    auto second = tape.custom(
        {first}, [&](const std::vector<Tensor>& in) {
          auto out = zeros(in[0]->shape);
          for (size_t i = 0; i < out->numel(); ++i)
            out->data[i] = in[0]->data[i] + 5.0;
          return out;
        },
        [](const std::vector<Tensor>&, const Tensor&,
           const std::vector<double>& g) {
          std::vector<double> gy(g.size());
          for (size_t i = 0; i < g.size(); ++i) gy[i] = 7.0 * g[i];
          return std::vector<std::vector<double>>{gy};
        });
    tape.backward(tape.sum(second));
    CHECK(x->grad == std::vector<double>{21, 21});
  }
  {
    // Backward functions must hand back one gradient per input.
    Tape tape;
    auto x = make_tensor({2}, {1.0, 2.0}, true);
    auto y = tape.custom(
        {x}, [](const std::vector<Tensor>& in) {
          return make_tensor(in[0]->shape, in[0]->data);
        },
        [](const std::vector<Tensor>&, const Tensor&,
           const std::vector<double>&) {
          return std::vector<std::vector<double>>{};
        });
    CHECK_THROWS_AS(tape.backward(tape.sum(y)), ShapeError);
  }
}

TEST_CASE("backward guards: scalar loss, single shot, recording required") {
  Tape tape;
  auto x = make_tensor({2, 2}, {1, 2, 3, 4}, true);
  auto y = tape.mul_scalar(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);

  auto loss = tape.sum(y);
  tape.backward(loss);
  CHECK(x->grad == std::vector<double>{2, 2, 2, 2});
  CHECK_THROWS_AS(tape.backward(loss), Error);

  Tape eval(false);
  auto z = eval.sum(eval.mul_scalar(x, 2.0));
  CHECK(z->item() == 20.0);
  CHECK_THROWS_AS(eval.backward(z), Error);
  CHECK(eval.size() == 0);  // nothing recorded in evaluation mode
}

TEST_CASE("tape is linear: gradient of a sum equals the sum of gradients") {
  Rng rng(19);
  auto a = zeros({3, 3}, true);
  auto b = zeros({3, 3}, true);
  oracle::fill_normal(a, rng);
  oracle::fill_normal(b, rng);

  auto run = [&](int which) {
    Tape tape;
    auto l1 = tape.sum(tape.matmul(a, b));
    auto l2 = tape.mean(tape.mul(a, a));
    Tensor loss = which == 0 ? l1 : which == 1 ? l2 : tape.add(l1, l2);
    tape.backward(loss);
    auto g = a->grad;
    a->zero_grad();
    b->zero_grad();
    return g;
  };

  auto g1 = run(0);
  auto g2 = run(1);
  auto gsum = run(2);
  for (size_t i = 0; i < gsum.size(); ++i) CHECK(gsum[i] == g1[i] + g2[i]);
}

TEST_CASE("replaying the same graph reproduces gradients bit for bit") {
  Rng rng(20);
  auto x = zeros({4, 4}, true);
  oracle::fill_normal(x, rng);

  // Diamond-shaped graph: x feeds two consumers whose contributions must be
  // accumulated in a fixed order for bitwise reproducibility.
  auto run = [&]() {
    Tape tape;
    auto left = tape.softmax_lastdim(x);
    auto right = tape.gelu(x);
    auto loss = tape.sum(tape.mul(left, right));
    tape.backward(loss);
    auto result = std::make_pair(loss->item(), x->grad);
    x->zero_grad();
    return result;
  };

  auto first = run();
  auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("tensor constructors validate shapes and flag finiteness") {
  CHECK_THROWS_AS(make_tensor({2, 3}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(zeros({0, 3}), ShapeError);
  auto s = scalar(1.5);
  CHECK(s->item() == 1.5);
  auto t = make_tensor({2}, {1.0, std::nan("")});
  CHECK_FALSE(t->all_finite());
  CHECK(shape_numel({3, 4, 5}) == 60);
}
