#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "raq/ops.hpp"
#include "raq/optim.hpp"
#include "raq/tensor.hpp"

using namespace raq;
using raq::testing::gradient_rel_error;
using raq::testing::probe;
using raq::testing::random_tensor;

TEST_SUITE("tensor_autodiff") {

TEST_CASE("tensor construction checks shape and finiteness") {
  CHECK_THROWS_AS(Tensorf::from({2, 2}, {1, 2, 3}), shape_error);
  CHECK_THROWS_AS(Tensorf::from({1}, {std::nanf("")}), numeric_error);
  auto t = Tensorf::zeros({2, 3}, true);
  CHECK(t.size() == 6);
  CHECK(t.grad().size() == 6);
  CHECK(!t.has_grad());
}

TEST_CASE("matmul hand cases") {
  auto id = Tensorf::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensorf::from({2, 2}, {2, 3, 4, 5});
  auto c = matmul(id, b);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{2, 3, 4, 5});
  auto r = matmul(Tensorf::from({1, 2}, {1, 2}), Tensorf::from({2, 1}, {3, 4}));
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r.item() == 11.0f);
  CHECK_THROWS_AS(matmul(Tensorf::zeros({2, 3}), Tensorf::zeros({2, 3})), shape_error);
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_tensor<double>(rng, {3, 4});
    auto b = random_tensor<double>(rng, {4, 2});
    auto w = random_tensor<double>(rng, {3, 2}, false);
    std::vector<Tensord> leaves{a, b};
    CHECK(gradient_rel_error<double>(leaves, [&] { return probe(matmul(a, b), w); }) < 1e-4);
  }
}

TEST_CASE("elementwise values") {
  CHECK(sigmoid(Tensorf::scalar(0)).item() == doctest::Approx(0.5));
  CHECK(tanh(Tensorf::scalar(0)).item() == 0.0f);
  CHECK(relu(Tensorf::from({2}, {-1, 2}))[0] == 0.0f);
  auto a = Tensorf::from({2}, {1, 2});
  CHECK((a + Tensorf::scalar(1))[1] == 3.0f);
  CHECK((Tensorf::scalar(2) * a)[1] == 4.0f);
  CHECK((a - a)[0] == 0.0f);
  CHECK_THROWS_AS(add(Tensorf::zeros({2}), Tensorf::zeros({3})), shape_error);
}

TEST_CASE("unary op derivatives match finite differences at 100 points") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (auto op : {UnaryOp::sigmoid, UnaryOp::tanh, UnaryOp::relu}) {
    for (int trial = 0; trial < 100; ++trial) {
      double v = u(rng);
      if (op == UnaryOp::relu && std::abs(v) < 0.01) v += 0.05;  // keep the kink outside the stencil
      auto x = Tensord::from({1}, {v}, true);
      std::vector<Tensord> leaves{x};
      CHECK(gradient_rel_error<double>(leaves, [&] { return sum(elementwise(op, x)); }) < 1e-4);
    }
  }
}

TEST_CASE("binary op and broadcast gradients match finite differences") {
  std::mt19937_64 rng(12);
  for (auto op : {BinaryOp::add, BinaryOp::sub, BinaryOp::mul}) {
    for (int trial = 0; trial < 100; ++trial) {
      auto a = random_tensor<double>(rng, {2, 3});
      auto b = random_tensor<double>(rng, {2, 3});
      auto s = random_tensor<double>(rng, {});
      auto w = random_tensor<double>(rng, {2, 3}, false);
      std::vector<Tensord> leaves{a, b, s};
      CHECK(gradient_rel_error<double>(leaves, [&] {
              return add(probe(elementwise(op, a, b), w), probe(elementwise(op, s, a), w));
            }) < 1e-4);
    }
  }
}

TEST_CASE("shape ops route gradients") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor<double>(rng, {2, 3, 4});
    auto t = random_tensor<double>(rng, {5, 3});
    auto w1 = random_tensor<double>(rng, {4, 2, 3}, false);
    auto w2 = random_tensor<double>(rng, {6, 2}, false);
    auto w3 = random_tensor<double>(rng, {4, 3}, false);
    std::vector<std::int32_t> idx{4, 0, 4, 2};
    std::vector<Tensord> leaves{x, t};
    CHECK(gradient_rel_error<double>(leaves, [&] {
            auto a = probe(permute(x, {2, 0, 1}), w1);
            auto b = probe(slice_cols(reshape(x, {6, 4}), 1, 2), w2);
            auto c = probe(gather_rows(t, idx), w3);
            auto d = sum(square(concat_rows<double>({row(t, 1), row(t, 3)})));
            return add(add(a, b), add(c, d));
          }) < 1e-4);
  }
}

TEST_CASE("permute moves entries") {
  auto x = Tensorf::from({1, 2, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  auto y = permute(x, {0, 2, 3, 1});
  CHECK(y.shape() == Shape{1, 2, 3, 2});
  // y[0,0,0,:] = x[0,:,0,0] = {0, 6}
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 6.0f);
  CHECK(y[2] == 1.0f);
}

TEST_CASE("conv2d hand cases") {
  auto ones = Tensorf::full({1, 1, 3, 3}, 1.0f);
  auto k = Tensorf::full({1, 1, 3, 3}, 1.0f);
  auto y = conv2d<float>(ones, k, std::nullopt, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0f);

  std::mt19937_64 rng(3);
  auto x = random_tensor<float>(rng, {2, 1, 5, 4}, false);
  std::vector<float> center(9, 0.0f);
  center[4] = 1.0f;
  auto same = conv2d<float>(x, Tensorf::from({1, 1, 3, 3}, center), std::nullopt, 1, 1);
  CHECK(same.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(same[i] == x[i]);

  CHECK_THROWS_AS(conv2d<float>(Tensorf::zeros({1, 1, 4, 4}), Tensorf::zeros({1, 1, 3, 3}), std::nullopt, 2, 0),
                  shape_error);
  CHECK_THROWS_AS(conv2d<float>(Tensorf::zeros({1, 2, 4, 4}), Tensorf::zeros({1, 1, 3, 3}), std::nullopt, 1, 0),
                  shape_error);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t stride = 1 + trial % 2;
    const std::size_t h = stride == 1 ? 5 : 6;
    auto x = random_tensor<double>(rng, {2, 2, h, h});
    auto k = random_tensor<double>(rng, {3, 2, 2 + stride, 2 + stride});
    auto b = random_tensor<double>(rng, {3});
    auto y0 = conv2d<double>(x.detach(), k.detach(), b.detach(), stride, 1);
    auto w = random_tensor<double>(rng, y0.shape(), false);
    std::vector<Tensord> leaves{x, k, b};
    CHECK(gradient_rel_error<double>(leaves, [&] { return probe(conv2d<double>(x, k, b, stride, 1), w); }) < 1e-3);
  }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // <conv(x), y> == <x, conv_T(y)> for matching geometry.
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>(rng, {1, 2, 8, 8}, false);
  auto k = random_tensor<double>(rng, {3, 2, 4, 4}, false);
  auto y = random_tensor<double>(rng, {1, 3, 4, 4}, false);
  const double lhs = sum(mul(conv2d<double>(x, k, std::nullopt, 2, 1), y)).item();
  const double rhs = sum(mul(x, conv_transpose2d<double>(y, k, std::nullopt, 2, 1))).item();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  CHECK(conv_transpose2d<double>(y, k, std::nullopt, 2, 1).shape() == Shape{1, 2, 8, 8});
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor<double>(rng, {2, 3, 3, 3});
    auto k = random_tensor<double>(rng, {3, 2, 4, 4});
    auto b = random_tensor<double>(rng, {2});
    auto w = random_tensor<double>(rng, {2, 2, 6, 6}, false);
    std::vector<Tensord> leaves{x, k, b};
    CHECK(gradient_rel_error<double>(leaves, [&] { return probe(conv_transpose2d<double>(x, k, b, 2, 1), w); }) <
          1e-3);
  }
}

TEST_CASE("backward hand cases") {
  auto w = Tensorf::from({3}, {1, 2, 3}, true);
  backward(sum(w));
  CHECK(std::vector<float>(w.grad().begin(), w.grad().end()) == std::vector<float>{1, 1, 1});
  w.zero_grad();
  backward(sum(square(w)));
  CHECK(std::vector<float>(w.grad().begin(), w.grad().end()) == std::vector<float>{2, 4, 6});
  CHECK_THROWS_AS(backward(square(w)), shape_error);
}

TEST_CASE("repeated backward accumulates and is linear") {
  std::mt19937_64 rng(31);
  auto w = random_tensor<double>(rng, {4});
  auto l1 = sum(square(w));
  auto l2 = sum(tanh(w));
  backward(l1);
  backward(l1);
  std::vector<double> twice(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(l1);
  for (std::size_t i = 0; i < 4; ++i) CHECK(twice[i] == doctest::Approx(2 * w.grad()[i]));

  w.zero_grad();
  backward(l1);
  backward(l2);
  std::vector<double> separate(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(add(l1, l2));
  for (std::size_t i = 0; i < 4; ++i) CHECK(separate[i] == doctest::Approx(w.grad()[i]).epsilon(1e-12));
}

TEST_CASE("composite MLP gradient matches finite differences") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<double>(rng, {5, 3}, false);
    auto w1 = random_tensor<double>(rng, {3, 8});
    auto b1 = random_tensor<double>(rng, {5, 8});
    auto w2 = random_tensor<double>(rng, {8, 2});
    auto y = random_tensor<double>(rng, {5, 2}, false);
    std::vector<Tensord> leaves{w1, b1, w2};
    CHECK(gradient_rel_error<double>(leaves, [&] {
            return mse_loss(matmul(sigmoid(add(matmul(x, w1), b1)), w2), y);
          }) < 1e-4);
  }
}

TEST_CASE("tape lists each op once, inputs first") {
  auto w = Tensorf::from({2}, {0.5f, -0.5f}, true);
  auto a = tanh(w);
  auto b = mul(a, a);   // diamond: a feeds b twice
  auto c = add(b, a);
  auto loss = sum(c);
  Tape<float> tape(loss);
  CHECK(tape.size() == 4);
  std::vector<const void*> order;
  for (auto* op : tape.ops()) order.push_back(op);
  auto pos = [&](const Tensorf& t) { return std::find(order.begin(), order.end(), t.id()) - order.begin(); };
  CHECK(pos(a) < pos(b));
  CHECK(pos(b) < pos(c));
  CHECK(pos(c) < pos(loss));
}

TEST_CASE("no_grad guard records nothing") {
  auto w = Tensorf::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(square(w));
  CHECK(!y.requires_grad());
}

TEST_CASE("non-finite forward values are an error") {
  auto big = Tensorf::from({1}, {3e38f});
  CHECK_THROWS_AS(mul(big, big), numeric_error);
}

TEST_CASE("forward values stay finite for inputs in [-10, 10]") {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor<float>(rng, {4, 4}, false, -10, 10);
    auto y = random_tensor<float>(rng, {4, 4}, false, -10, 10);
    CHECK_NOTHROW(sum(add(mul(sigmoid(x), tanh(y)), relu(matmul(x, y)))));
  }
}

TEST_CASE("sgd step") {
  auto w = Tensorf::from({1}, {1.0f}, true);
  backward(scale(sum(w), 2.0));
  CHECK(w.grad()[0] == 2.0f);
  std::vector<Tensorf> ps{w};
  sgd_step<float>(ps, 0.1);
  CHECK(w[0] == doctest::Approx(0.8));
  auto fresh = Tensorf::from({1}, {1.0f}, true);
  std::vector<Tensorf> none{fresh};
  CHECK_THROWS_AS(sgd_step<float>(none, 0.1), std::logic_error);
}

TEST_CASE("adamw first step moves against the gradient") {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = random_tensor<double>(rng, {5});
    auto c = random_tensor<double>(rng, {5}, false);
    std::vector<double> before(w.data().begin(), w.data().end());
    backward(sum(mul(w, c)));
    std::vector<double> g(w.grad().begin(), w.grad().end());
    AdamW<double> opt({.lr = 1e-3, .weight_decay = 0.0});
    std::vector<Tensord> ps{w};
    opt.step(ps);
    for (std::size_t i = 0; i < 5; ++i) CHECK((w[i] - before[i]) * g[i] < 0);
  }
}

TEST_CASE("adamw minimises a convex bowl") {
  auto w = Tensord::from({1}, {1.0}, true);
  AdamW<double> opt({.lr = 0.05, .weight_decay = 0.0});
  std::vector<Tensord> ps{w};
  for (int i = 0; i < 100; ++i) {
    w.zero_grad();
    backward(sum(square(w)));
    opt.step(ps);
  }
  CHECK(std::abs(w[0]) < 0.1);
}

}  // TEST_SUITE
