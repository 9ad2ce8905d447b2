#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "pctk/lmstack.hpp"

using lmstack::Model;
using lmstack::ModelConfig;
using nnkit::Mode;
using nnkit::Rng;
using nnkit::Tape;
using nnkit::Var;

namespace {

ModelConfig small_config(const std::string& kind) {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.hidden_mult = 4;
  cfg.block_kind = kind;
  cfg.max_seq_len = 16;
  cfg.seed = 5;
  return cfg;
}

std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab))));
  return out;
}

}  // namespace

// ==== config JSON ===========================================================

TEST_CASE("model config round-trips through JSON") {
  ModelConfig cfg = small_config("pc-rk4-ms");
  cfg.layers = 3;
  cfg.dropout = 0.1;
  cfg.sublayer_drop = 0.25;
  cfg.layerwise_gamma = true;
  cfg.per_stage_rknorm = true;
  cfg.rk_norm = true;
  cfg.seed = 123456789012345ull;

  ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.vocab_size == cfg.vocab_size);
  CHECK(back.width == cfg.width);
  CHECK(back.heads == cfg.heads);
  CHECK(back.layers == cfg.layers);
  CHECK(back.hidden_mult == cfg.hidden_mult);
  CHECK(back.block_kind == cfg.block_kind);
  CHECK(back.dropout == cfg.dropout);
  CHECK(back.sublayer_drop == cfg.sublayer_drop);
  CHECK(back.max_seq_len == cfg.max_seq_len);
  CHECK(back.seed == cfg.seed);
  CHECK(back.layerwise_gamma == cfg.layerwise_gamma);
  CHECK(back.per_stage_rknorm == cfg.per_stage_rknorm);
  CHECK(back.rk_norm == cfg.rk_norm);
}

TEST_CASE("config parsing applies defaults and rejects bad input") {
  ModelConfig cfg = ModelConfig::from_json(
      R"({"vocab_size": 30, "width": 8, "block_kind": "rk2"})");
  CHECK(cfg.heads == 1);
  CHECK(cfg.layers == 1);
  CHECK(cfg.hidden_mult == 4);
  CHECK(cfg.max_seq_len == 256);
  CHECK(cfg.rk_norm == true);

  // Unknown key is named in the error.
  try {
    ModelConfig::from_json(
        R"({"vocab_size": 30, "width": 8, "block_kind": "rk2", "widht": 4})");
    FAIL("expected ConfigError");
  } catch (const pctk::ConfigError& e) {
    CHECK(std::string(e.what()).find("widht") != std::string::npos);
  }

  CHECK_THROWS_AS(ModelConfig::from_json(R"({"width": 8, "block_kind": "rk2"})"),
                  pctk::ConfigError);  // missing vocab_size
  CHECK_THROWS_AS(ModelConfig::from_json(
                      R"({"vocab_size": 30, "width": 8, "block_kind": "rk9"})"),
                  pctk::ConfigError);  // unknown kind
  CHECK_THROWS_AS(ModelConfig::from_json(
                      R"({"vocab_size": 30, "width": "8", "block_kind": "rk2"})"),
                  pctk::ConfigError);  // wrong type
  CHECK_THROWS_AS(ModelConfig::from_json("not json at all"), pctk::ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(
                      R"({"vocab_size": 30, "width": 9, "heads": 2, "block_kind": "rk2"})"),
                  pctk::ConfigError);  // width % heads
}

// ==== parameter counting ====================================================

TEST_CASE("parameter count matches the closed form for every kind and depth") {
  for (const std::string& kind : pcblock::BlockKind::all_names()) {
    for (int layers : {0, 1, 2, 4}) {
      ModelConfig cfg = small_config(kind);
      cfg.layers = layers;
      Model m(cfg);
      CAPTURE(kind);
      CAPTURE(layers);
      CHECK(m.store().total_params() == Model::expected_param_count(cfg));
    }
  }
}

TEST_CASE("hand-computed count for the vanilla base config") {
  // embed 11*8 + 16*8 = 216; layer = 4*64 + 3*8 + 4*8 + 2*4*64 + 4*8 + 8 = 864;
  // final LN 16; head 8*11 + 11 = 99.
  ModelConfig cfg = small_config("vanilla");
  CHECK(Model::expected_param_count(cfg) == 216u + 864u + 16u + 99u);
}

TEST_CASE("ema adds exactly one shared scalar") {
  ModelConfig rk2 = small_config("rk2");
  ModelConfig ema = small_config("rk2-ema");
  for (int layers : {1, 2, 4}) {
    rk2.layers = ema.layers = layers;
    CHECK(Model::expected_param_count(ema) == Model::expected_param_count(rk2) + 1);
  }
}

TEST_CASE("layerwise gamma adds one scalar per layer instead") {
  ModelConfig shared = small_config("rk4-ema");
  ModelConfig layerwise = small_config("rk4-ema");
  layerwise.layerwise_gamma = true;
  for (int layers : {1, 3}) {
    shared.layers = layerwise.layers = layers;
    CHECK(Model::expected_param_count(layerwise) ==
          Model::expected_param_count(shared) - 1 + static_cast<std::size_t>(layers));
  }
}

TEST_CASE("the multistep corrector adds four scalars per layer") {
  ModelConfig ema = small_config("rk2-ema");
  ModelConfig ms = small_config("pc-rk2-ms");
  for (int layers : {1, 2, 4}) {
    ema.layers = ms.layers = layers;
    CHECK(Model::expected_param_count(ms) ==
          Model::expected_param_count(ema) + 4u * static_cast<std::size_t>(layers));
  }
}

TEST_CASE("rk2 and rk4 cost the same parameters under shared RK-Norm") {
  ModelConfig rk2 = small_config("rk2");
  ModelConfig rk4 = small_config("rk4");
  CHECK(Model::expected_param_count(rk2) == Model::expected_param_count(rk4));

  // Per-stage RK-Norm splits them: four LN sets versus two.
  rk2.per_stage_rknorm = rk4.per_stage_rknorm = true;
  CHECK(Model::expected_param_count(rk4) ==
        Model::expected_param_count(rk2) + 2u * 2u * 8u);
}

TEST_CASE("adding a layer strictly increases the parameter count") {
  for (const std::string& kind : pcblock::BlockKind::all_names()) {
    ModelConfig cfg = small_config(kind);
    std::size_t prev = Model::expected_param_count(cfg);
    for (int layers = 2; layers <= 4; ++layers) {
      cfg.layers = layers;
      std::size_t cur = Model::expected_param_count(cfg);
      CHECK(cur > prev);
      prev = cur;
    }
  }
}

// ==== forward shapes & semantics ============================================

TEST_CASE("forward produces [batch, seq, vocab] logits") {
  ModelConfig cfg;
  cfg.vocab_size = 50;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.block_kind = "pc-rk2-be";
  cfg.max_seq_len = 32;
  Model m(cfg);

  Tape tape;
  Rng rng(0), data_rng(9);
  std::vector<int> tokens = random_tokens(2 * 8, 50, data_rng);
  Var logits = m.forward(tape, tokens, 2, 8, Mode::Eval, rng);
  CHECK(logits.shape() == std::vector<int>{2, 8, 50});
}

TEST_CASE("perturbing a token leaves earlier logits bitwise unchanged") {
  ModelConfig cfg;
  cfg.vocab_size = 23;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.block_kind = "pc-rk4-ms";
  cfg.layerwise_gamma = true;
  cfg.max_seq_len = 16;
  Model m(cfg);

  std::vector<int> a{3, 1, 4, 1, 5, 9, 2, 6};
  std::vector<int> b = a;
  b[5] = 7;  // perturb position 5

  Tape ta, tb;
  Rng ra(0), rb(0);
  const nnkit::Tensor& la = m.forward(ta, a, 1, 8, Mode::Eval, ra).value();
  const nnkit::Tensor& lb = m.forward(tb, b, 1, 8, Mode::Eval, rb).value();
  const int V = cfg.vocab_size;
  for (int s = 0; s < 5; ++s)
    for (int v = 0; v < V; ++v)
      CHECK(la[static_cast<std::size_t>(s * V + v)] ==
            lb[static_cast<std::size_t>(s * V + v)]);
  // ... and the perturbed position itself reacts.
  bool changed = false;
  for (int v = 0; v < V; ++v)
    changed = changed || la[static_cast<std::size_t>(5 * V + v)] !=
                             lb[static_cast<std::size_t>(5 * V + v)];
  CHECK(changed);
}

TEST_CASE("a zero-layer model is head(LN(embed(tokens)))") {
  ModelConfig cfg = small_config("vanilla");
  cfg.layers = 0;
  Model m(cfg);

  std::vector<int> tokens{1, 2, 3, 4, 5, 6};
  Tape tape;
  Rng rng(0);
  const nnkit::Tensor& got = m.forward(tape, tokens, 2, 3, Mode::Eval, rng).value();

  Tape ref;
  Rng ref_rng(0);
  auto& st = m.store();
  Var tok = ref.embedding(tokens, 2, 3, ref.param(st.at("embed.tok")));
  std::vector<int> pos{0, 1, 2, 0, 1, 2};
  Var emb = ref.add(tok, ref.embedding(pos, 2, 3, ref.param(st.at("embed.pos"))));
  Var normed =
      ref.layer_norm(emb, ref.param(st.at("final_ln.g")), ref.param(st.at("final_ln.b")));
  Var want =
      ref.add_bias(ref.matmul(normed, ref.param(st.at("head.w"))), ref.param(st.at("head.b")));

  REQUIRE(got.shape() == want.value().shape());
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got[i] == want.value()[i]);
}

TEST_CASE("forward validates tokens, shape and sequence length") {
  Model m(small_config("rk2"));
  Tape tape;
  Rng rng(0);
  std::vector<int> tokens{1, 2, 3, 4};
  CHECK_THROWS_AS(m.forward(tape, tokens, 1, 3, Mode::Eval, rng), pctk::ShapeError);
  CHECK_THROWS_AS(m.forward(tape, {1, 2, 3, 99}, 1, 4, Mode::Eval, rng), pctk::DataError);
  CHECK_THROWS_AS(m.forward(tape, {1, 2, 3, -1}, 1, 4, Mode::Eval, rng), pctk::DataError);
  std::vector<int> long_tokens(17, 1);
  CHECK_THROWS_AS(m.forward(tape, long_tokens, 1, 17, Mode::Eval, rng),
                  pctk::ConfigError);
}

TEST_CASE("eval forwards are deterministic; train with rate 0 matches eval") {
  ModelConfig cfg = small_config("pc-rk2-ms");
  cfg.layers = 2;
  Model m(cfg);
  std::vector<int> tokens{0, 1, 2, 3, 4, 5, 6, 7};

  Tape t1, t2, t3;
  Rng r1(0), r2(99), r3(7);
  const nnkit::Tensor& a = m.forward(t1, tokens, 1, 8, Mode::Eval, r1).value();
  const nnkit::Tensor& b = m.forward(t2, tokens, 1, 8, Mode::Eval, r2).value();
  const nnkit::Tensor& c = m.forward(t3, tokens, 1, 8, Mode::Train, r3).value();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a[i] == b[i]);  // rng untouched in eval
    CHECK(a[i] == c[i]);  // dropout 0, sublayer_drop 0
  }
}

TEST_CASE("train-mode dropout changes outputs but stays seed-deterministic") {
  ModelConfig cfg = small_config("rk4-ema");
  cfg.dropout = 0.2;
  cfg.layers = 2;
  Model m(cfg);
  std::vector<int> tokens{3, 1, 4, 1, 5, 9, 2, 6};

  Tape t1, t2, t3;
  Rng r1(42), r2(42), r3(43);
  const nnkit::Tensor& a = m.forward(t1, tokens, 1, 8, Mode::Train, r1).value();
  const nnkit::Tensor& b = m.forward(t2, tokens, 1, 8, Mode::Train, r2).value();
  const nnkit::Tensor& c = m.forward(t3, tokens, 1, 8, Mode::Train, r3).value();

  bool same_seed_equal = true, diff_seed_equal = true;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    same_seed_equal = same_seed_equal && a[i] == b[i];
    diff_seed_equal = diff_seed_equal && a[i] == c[i];
  }
  CHECK(same_seed_equal);
  CHECK_FALSE(diff_seed_equal);
}

// ==== loss_and_ppl ==========================================================

TEST_CASE("a perfect predictor drives perplexity to 1") {
  Tape tape;
  const int M = 6, V = 9;
  nnkit::Tensor t({M, V});
  std::vector<int> targets(M);
  for (int i = 0; i < M; ++i) {
    targets[static_cast<std::size_t>(i)] = i % V;
    t[static_cast<std::size_t>(i * V + i % V)] = 40.0;  // huge margin
  }
  auto r = lmstack::loss_and_ppl(tape, tape.leaf(t), targets);
  CHECK(r.loss_value == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.ppl == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("uniform logits over vocab 10 give perplexity 10") {
  Tape tape;
  nnkit::Tensor t({4, 10});  // zeros
  auto r = lmstack::loss_and_ppl(tape, tape.leaf(t), {0, 3, 7, 9});
  CHECK(r.ppl == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("a random-init model scores within 15% of vocab-size perplexity") {
  ModelConfig cfg;
  cfg.vocab_size = 50;
  cfg.width = 32;
  cfg.heads = 4;
  cfg.layers = 2;
  cfg.block_kind = "pc-rk4-ms";
  cfg.max_seq_len = 32;
  cfg.seed = 11;
  Model m(cfg);

  Tape tape;
  Rng rng(0), data_rng(123);
  const int B = 4, S = 16;
  std::vector<int> tokens = random_tokens(B * S, cfg.vocab_size, data_rng);
  std::vector<int> targets = random_tokens(B * S, cfg.vocab_size, data_rng);
  Var logits = m.forward(tape, tokens, B, S, Mode::Eval, rng);
  auto r = lmstack::loss_and_ppl(tape, logits, targets);
  CHECK(r.ppl > 0.85 * 50.0);
  CHECK(r.ppl < 1.15 * 50.0);
}

// ==== gradients through the whole stack =====================================

TEST_CASE("analytic gradients through a full model match finite differences") {
  ModelConfig cfg;
  cfg.vocab_size = 7;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.block_kind = "pc-rk4-ms";
  cfg.max_seq_len = 8;
  cfg.seed = 3;
  Model m(cfg);

  Rng data_rng(5);
  const int B = 2, S = 4;
  std::vector<int> tokens = random_tokens(B * S, cfg.vocab_size, data_rng);
  std::vector<int> targets = random_tokens(B * S, cfg.vocab_size, data_rng);

  auto loss_fn = [&](bool do_backward) {
    Tape tape;
    Rng rng(0);
    Var logits = m.forward(tape, tokens, B, S, Mode::Eval, rng);
    auto r = lmstack::loss_and_ppl(tape, logits, targets);
    if (do_backward) {
      tape.backward(r.loss);
      tape.flush_param_grads();
    }
    return r.loss_value;
  };

  Rng pick(2024);
  auto report = nnkit::grad_check(loss_fn, m.store(), 150, pick);
  CAPTURE(report.worst_param);
  CAPTURE(report.worst_ad);
  CAPTURE(report.worst_fd);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("a shared gamma accumulates gradient from every layer") {
  ModelConfig cfg = small_config("pc-rk2-be");
  cfg.layers = 3;
  Model m(cfg);
  REQUIRE(m.store().contains("gamma_raw"));

  Tape tape;
  Rng rng(0), data_rng(8);
  std::vector<int> tokens = random_tokens(8, cfg.vocab_size, data_rng);
  std::vector<int> targets = random_tokens(8, cfg.vocab_size, data_rng);
  Var logits = m.forward(tape, tokens, 1, 8, Mode::Eval, rng);
  auto r = lmstack::loss_and_ppl(tape, logits, targets);
  tape.backward(r.loss);
  tape.flush_param_grads();
  CHECK(m.store().at("gamma_raw").grad[0] != 0.0);
}

// ==== checkpoint round trip =================================================

TEST_CASE("checkpoints restore a model bitwise") {
  ModelConfig cfg = small_config("pc-rk4-ms");
  cfg.layers = 2;
  Model a(cfg);
  const std::string path = "./lmstack_ckpt_test.pck";
  nnkit::save_checkpoint(a.store(), path);

  cfg.seed = 777;  // different init, same shapes
  Model b(cfg);
  nnkit::load_checkpoint(b.store(), path);
  REQUIRE(a.store().size() == b.store().size());
  for (std::size_t i = 0; i < a.store().size(); ++i) {
    const auto& pa = a.store().item(i);
    const auto& pb = b.store().item(i);
    REQUIRE(pa.name == pb.name);
    REQUIRE(pa.value.numel() == pb.value.numel());
    for (std::size_t k = 0; k < pa.value.numel(); ++k)
      CHECK(pa.value[k] == pb.value[k]);
  }
  std::remove(path.c_str());
}
