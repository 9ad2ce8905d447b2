#include <doctest.h>

#include <cmath>
#include <functional>

#include "pctk/nnkit/gradcheck.hpp"
#include "pctk/nnkit/tape.hpp"

using nnkit::AttentionParams;
using nnkit::Mode;
using nnkit::ParamStore;
using nnkit::Rng;
using nnkit::Tape;
using nnkit::Tensor;
using nnkit::Var;

namespace {

void randomize(ParamStore& store, Rng& rng, double scale = 0.5) {
  for (std::size_t i = 0; i < store.size(); ++i)
    for (std::size_t k = 0; k < store.item(i).value.numel(); ++k)
      store.item(i).value[k] = rng.normal(0.0, scale);
}

// Central differences over every scalar of every parameter.
double exhaustive_fd_max_rel(const std::function<double(bool)>& loss_fn,
                             ParamStore& store, double eps = 1e-5) {
  store.zero_grads();
  loss_fn(true);
  std::vector<Tensor> ad(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) ad[i] = store.item(i).grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    nnkit::Parameter& p = store.item(i);
    for (std::size_t k = 0; k < p.value.numel(); ++k) {
      const double orig = p.value[k];
      p.value[k] = orig + eps;
      const double lp = loss_fn(false);
      p.value[k] = orig - eps;
      const double lm = loss_fn(false);
      p.value[k] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double rel =
          std::abs(ad[i][k] - fd) / std::max(1e-8, std::abs(ad[i][k]) + std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace

// ====================================================================
//  frozen forward values
// ====================================================================

TEST_CASE("layer_norm of [1,2,3] with eps 0 is [-1.2247.., 0, 1.2247..]") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_data({1, 3}, {1.0, 2.0, 3.0}));
  Var g = tape.leaf(Tensor::from_data({3}, {1.0, 1.0, 1.0}));
  Var b = tape.leaf(Tensor::from_data({3}, {0.0, 0.0, 0.0}));
  Var y = tape.layer_norm(x, g, b, 0.0);
  const double want = std::sqrt(1.5);  // 1/sqrt(2/3)
  CHECK(std::abs(y.value()[0] + want) <= 1e-12);
  CHECK(std::abs(y.value()[1]) <= 1e-12);
  CHECK(std::abs(y.value()[2] - want) <= 1e-12);
}

TEST_CASE("matmul + bias: [1,1] @ [[1,2],[3,4]] = [4,6]") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_data({1, 2}, {1.0, 1.0}));
  Var w = tape.leaf(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Var b = tape.leaf(Tensor::from_data({2}, {0.0, 0.0}));
  Var y = tape.add_bias(tape.matmul(x, w), b);
  CHECK(y.value()[0] == 4.0);
  CHECK(y.value()[1] == 6.0);
}

TEST_CASE("two-layer relu chain: all-ones weights double then sum") {
  // width-1 input [2], hidden 2 (all-ones weights, zero bias): relu([2,2]) -> 4
  Tape tape;
  Var x = tape.leaf(Tensor::from_data({1, 1}, {2.0}));
  Var w1 = tape.leaf(Tensor::from_data({1, 2}, {1.0, 1.0}));
  Var w2 = tape.leaf(Tensor::from_data({2, 1}, {1.0, 1.0}));
  Var y = tape.matmul(tape.relu(tape.matmul(x, w1)), w2);
  CHECK(y.value()[0] == 4.0);
}

TEST_CASE("cross_entropy of logits [0, ln 3] at target 1 is -ln(3/4)") {
  Tape tape;
  Var logits = tape.leaf(Tensor::from_data({1, 2}, {0.0, std::log(3.0)}));
  Var loss = tape.cross_entropy(logits, {1});
  CHECK(std::abs(loss.value()[0] + std::log(0.75)) <= 1e-12);
}

TEST_CASE("cross_entropy gradient rows sum to ~0 (softmax rows sum to 1)") {
  Tape tape;
  Rng rng(5);
  const int m = 13, v = 17;
  Tensor lt({m, v});
  for (std::size_t i = 0; i < lt.numel(); ++i) lt[i] = rng.normal(0.0, 3.0);
  Var logits = tape.leaf(lt);
  std::vector<int> targets;
  for (int i = 0; i < m; ++i) targets.push_back(static_cast<int>(rng.uniform_index(v)));
  Var loss = tape.cross_entropy(logits, targets);
  tape.backward(loss);
  const Tensor& g = tape.grad(logits);
  for (int r = 0; r < m; ++r) {
    double row_sum = 0.0;
    for (int c = 0; c < v; ++c) row_sum += g[static_cast<std::size_t>(r) * v + c];
    CHECK(std::abs(row_sum) <= 1e-12);
  }
}

TEST_CASE("attention with zero q/k weights mixes the prefix uniformly") {
  // all scores equal -> softmax uniform over the causal prefix; with identity
  // value/output projections, row i of the output is the mean of rows 0..i
  Tape tape;
  const int s = 4, w = 2;
  Tensor xt({1, s, w});
  const double rows[s][w] = {{1, 2}, {3, 4}, {5, 6}, {7, 8}};
  for (int i = 0; i < s; ++i)
    for (int c = 0; c < w; ++c) xt[static_cast<std::size_t>(i) * w + c] = rows[i][c];
  Var x = tape.leaf(xt);

  Tensor eye({w, w});
  eye[0] = 1.0;
  eye[3] = 1.0;
  Tensor zero2({w, w}), zero1({w});
  AttentionParams p;
  p.wq = tape.leaf(zero2);
  p.wk = tape.leaf(zero2);
  p.wv = tape.leaf(eye);
  p.wo = tape.leaf(eye);
  p.bq = tape.leaf(zero1);
  p.bv = tape.leaf(zero1);
  p.bo = tape.leaf(zero1);
  Var y = tape.attention(x, p, 1, true);
  for (int i = 0; i < s; ++i) {
    for (int c = 0; c < w; ++c) {
      double mean = 0.0;
      for (int j = 0; j <= i; ++j) mean += rows[j][c];
      mean /= (i + 1);
      CHECK(std::abs(y.value()[static_cast<std::size_t>(i) * w + c] - mean) <= 1e-12);
    }
  }
}

TEST_CASE("attention is causal: future tokens cannot change earlier outputs") {
  ParamStore store;
  Rng rng(99);
  const int b = 1, s = 6, w = 8;
  store.create("wq", {w, w});
  store.create("wk", {w, w});
  store.create("wv", {w, w});
  store.create("wo", {w, w});
  store.create("bq", {w});
  store.create("bv", {w});
  store.create("bo", {w});
  randomize(store, rng);

  auto run = [&](const Tensor& xt) {
    Tape tape;
    AttentionParams p;
    p.wq = tape.param(store.at("wq"));
    p.wk = tape.param(store.at("wk"));
    p.wv = tape.param(store.at("wv"));
    p.wo = tape.param(store.at("wo"));
    p.bq = tape.param(store.at("bq"));
    p.bv = tape.param(store.at("bv"));
    p.bo = tape.param(store.at("bo"));
    Var y = tape.attention(tape.leaf(xt), p, 2, true);
    return y.value();
  };

  Tensor xt({b, s, w});
  for (std::size_t i = 0; i < xt.numel(); ++i) xt[i] = rng.normal();
  const Tensor y1 = run(xt);
  Tensor xt2 = xt;
  // perturb position 4; positions 0..3 must be bit-identical
  for (int c = 0; c < w; ++c) xt2[static_cast<std::size_t>(4) * w + c] += 13.5;
  const Tensor y2 = run(xt2);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < w; ++c) {
      const std::size_t k = static_cast<std::size_t>(i) * w + c;
      CHECK(y1[k] == y2[k]);
    }
}

TEST_CASE("dropout: eval is the same node, rate bounds checked, keep fraction sane") {
  Tape tape;
  Rng rng(1);
  Var x = tape.leaf(Tensor::full({40, 50}, 1.0));
  Var same = tape.dropout(x, 0.5, Mode::Eval, rng);
  CHECK(same.id == x.id);
  Var same2 = tape.dropout(x, 0.0, Mode::Train, rng);
  CHECK(same2.id == x.id);
  CHECK_THROWS_AS(tape.dropout(x, 1.0, Mode::Train, rng), pctk::DomainError);
  CHECK_THROWS_AS(tape.dropout(x, -0.1, Mode::Train, rng), pctk::DomainError);

  Var d = tape.dropout(x, 0.3, Mode::Train, rng);
  int kept = 0;
  for (std::size_t i = 0; i < d.value().numel(); ++i) {
    if (d.value()[i] != 0.0) {
      ++kept;
      CHECK(std::abs(d.value()[i] - 1.0 / 0.7) <= 1e-12);  // inverted scaling
    }
  }
  const double frac = static_cast<double>(kept) / 2000.0;
  CHECK(frac > 0.65);
  CHECK(frac < 0.75);
}

TEST_CASE("embedding gathers rows and validates ids") {
  Tape tape;
  Var table = tape.leaf(Tensor::from_data({3, 2}, {0, 1, 10, 11, 20, 21}));
  Var e = tape.embedding({2, 0, 1, 1}, 2, 2, table);
  CHECK(e.shape() == std::vector<int>{2, 2, 2});
  CHECK(e.value()[0] == 20.0);
  CHECK(e.value()[1] == 21.0);
  CHECK(e.value()[2] == 0.0);
  CHECK(e.value()[5] == 11.0);
  CHECK_THROWS_AS(tape.embedding({3, 0, 0, 0}, 2, 2, table), pctk::DataError);
  CHECK_THROWS_AS(tape.embedding({-1, 0, 0, 0}, 2, 2, table), pctk::DataError);
}

TEST_CASE("non-finite forward values trip the tape guard") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_data({2}, {1e200, 1e200}));
  Var ok = tape.mul(x, tape.leaf(Tensor::from_data({2}, {2.0, 2.0})));
  CHECK(ok.value()[0] == 2e200);  // large but finite: no throw
  bool threw = false;
  try {
    Var y = tape.mul(x, x);  // 1e400 overflows to inf
    (void)y;
  } catch (const pctk::NumericsError&) {
    threw = true;
  }
  CHECK(threw);
}

// ====================================================================
//  gradient correctness, op by op
// ====================================================================

TEST_CASE("grad: matmul/add_bias/sigmoid chain") {
  ParamStore store;
  Rng rng(21);
  store.create("x", {3, 4});
  store.create("w", {4, 5});
  store.create("b", {5});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var y = tape.sum_all(tape.sigmoid(
        tape.add_bias(tape.matmul(tape.param(store.at("x")), tape.param(store.at("w"))),
                      tape.param(store.at("b")))));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-7);
}

TEST_CASE("grad: layer_norm") {
  ParamStore store;
  Rng rng(22);
  store.create("x", {2, 3, 4});
  store.create("g", {4});
  store.create("b", {4});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var y = tape.sum_all(tape.sigmoid(tape.layer_norm(
        tape.param(store.at("x")), tape.param(store.at("g")), tape.param(store.at("b")))));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-7);
}

TEST_CASE("grad: causal multi-head attention") {
  ParamStore store;
  Rng rng(23);
  const int w = 8;
  store.create("x", {2, 4, w});
  for (const char* n : {"wq", "wk", "wv", "wo"}) store.create(n, {w, w});
  for (const char* n : {"bq", "bv", "bo"}) store.create(n, {w});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    AttentionParams p;
    p.wq = tape.param(store.at("wq"));
    p.wk = tape.param(store.at("wk"));
    p.wv = tape.param(store.at("wv"));
    p.wo = tape.param(store.at("wo"));
    p.bq = tape.param(store.at("bq"));
    p.bv = tape.param(store.at("bv"));
    p.bo = tape.param(store.at("bo"));
    Var y = tape.sum_all(tape.sigmoid(tape.attention(tape.param(store.at("x")), p, 2)));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-6);
}

TEST_CASE("grad: embedding + cross_entropy") {
  ParamStore store;
  Rng rng(24);
  store.create("table", {6, 5});
  store.create("w", {5, 6});
  randomize(store, rng);
  const std::vector<int> ids = {0, 3, 5, 1};
  const std::vector<int> targets = {3, 5, 1, 0};
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var e = tape.embedding(ids, 2, 2, tape.param(store.at("table")));
    Var logits = tape.matmul(e, tape.param(store.at("w")));
    Var loss = tape.cross_entropy(logits, targets);
    if (with_grad) {
      tape.backward(loss);
      tape.flush_param_grads();
    }
    return loss.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-7);
}

TEST_CASE("grad: scalar-broadcast mul, select, sub, scale") {
  ParamStore store;
  Rng rng(25);
  store.create("s", {1});
  store.create("v", {4});
  store.create("t", {2, 3});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var s = tape.param(store.at("s"));
    Var v = tape.param(store.at("v"));
    Var t = tape.param(store.at("t"));
    Var w0 = tape.select(v, 0);
    Var w2 = tape.select(v, 2);
    Var one = tape.constant(1.0);
    Var mix = tape.mul(tape.sub(one, tape.sigmoid(s)), w0);  // scalar chain
    Var scaled = tape.mul(mix, t);                           // broadcast onto tensor
    Var more = tape.add(scaled, tape.scale(tape.mul(w2, t), 0.75));
    Var y = tape.sum_all(tape.sigmoid(more));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-7);
}

TEST_CASE("grad: dropout with a replayed mask") {
  ParamStore store;
  Rng rng(26);
  store.create("x", {3, 4});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Rng drop_rng(123);  // fresh identical stream every call
    Var y = tape.sum_all(
        tape.sigmoid(tape.dropout(tape.param(store.at("x")), 0.4, Mode::Train, drop_rng)));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-7);
}

TEST_CASE("grad: parameter reused several times accumulates correctly") {
  ParamStore store;
  Rng rng(27);
  store.create("w", {3, 3});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var w = tape.param(store.at("w"));
    Var y = tape.sum_all(tape.sigmoid(tape.matmul(tape.matmul(w, w), w)));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  CHECK(exhaustive_fd_max_rel(loss_fn, store) <= 1e-6);
}

// ====================================================================
//  grad_check baselines
// ====================================================================

TEST_CASE("grad_check baseline: quadratic loss is exact to 1e-9") {
  ParamStore store;
  Rng rng(31);
  store.create("w", {8});
  randomize(store, rng);
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var w = tape.param(store.at("w"));
    Var target = tape.leaf(Tensor::full({8}, 0.25));
    Var d = tape.sub(w, target);
    Var y = tape.sum_all(tape.mul(d, d));
    if (with_grad) {
      tape.backward(y);
      tape.flush_param_grads();
    }
    return y.value()[0];
  };
  Rng pick(1);
  auto report = nnkit::grad_check(loss_fn, store, 64, pick);
  CHECK(report.max_rel_err <= 1e-9);
}

TEST_CASE("grad_check baseline: linear layer + cross entropy within 1e-6") {
  ParamStore store;
  Rng rng(32);
  store.create("w", {6, 9});
  store.create("b", {9});
  randomize(store, rng);
  Tensor xt({4, 6});
  for (std::size_t i = 0; i < xt.numel(); ++i) xt[i] = rng.normal();
  const std::vector<int> targets = {1, 4, 0, 8};
  auto loss_fn = [&](bool with_grad) {
    Tape tape;
    Var logits = tape.add_bias(tape.matmul(tape.leaf(xt), tape.param(store.at("w"))),
                               tape.param(store.at("b")));
    Var loss = tape.cross_entropy(logits, targets);
    if (with_grad) {
      tape.backward(loss);
      tape.flush_param_grads();
    }
    return loss.value()[0];
  };
  Rng pick(2);
  auto report = nnkit::grad_check(loss_fn, store, 200, pick);
  CHECK(report.max_rel_err <= 1e-6);
}
