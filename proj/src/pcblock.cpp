#include "pctk/pcblock.hpp"

#include <cmath>
#include <utility>

namespace pcblock {

using nnkit::ParamStore;
using nnkit::Parameter;
using nnkit::Rng;
using nnkit::Tape;
using nnkit::Tensor;
using nnkit::Var;

// ====================================================================
//  BlockKind table
// ====================================================================

namespace {

struct KindRow {
  const char* name;
  BlockKind kind;
};

const std::vector<KindRow>& kind_table() {
  static const std::vector<KindRow> rows = {
      {"vanilla", {Solver::Vanilla, CoeffMode::Classical, Corrector::None}},
      {"rk2", {Solver::Rk2, CoeffMode::Classical, Corrector::None}},
      {"rk4", {Solver::Rk4, CoeffMode::Classical, Corrector::None}},
      {"rk2-ema", {Solver::Rk2, CoeffMode::Ema, Corrector::None}},
      {"rk4-ema", {Solver::Rk4, CoeffMode::Ema, Corrector::None}},
      {"pc-rk2-ms", {Solver::Rk2, CoeffMode::Ema, Corrector::Multistep}},
      {"pc-rk2-be", {Solver::Rk2, CoeffMode::Ema, Corrector::BackwardEuler}},
      {"pc-rk4-ms", {Solver::Rk4, CoeffMode::Ema, Corrector::Multistep}},
      {"pc-rk4-be", {Solver::Rk4, CoeffMode::Ema, Corrector::BackwardEuler}},
  };
  return rows;
}

}  // namespace

void BlockKind::validate() const {
  if (solver == Solver::Vanilla &&
      (coeff != CoeffMode::Classical || corrector != Corrector::None))
    throw pctk::ConfigError("BlockKind: vanilla permits only classical + no corrector");
  for (const KindRow& row : kind_table())
    if (row.kind == *this) return;
  throw pctk::ConfigError("BlockKind: combination is outside the supported table");
}

std::string BlockKind::str() const {
  for (const KindRow& row : kind_table())
    if (row.kind == *this) return row.name;
  throw pctk::ConfigError("BlockKind: combination has no canonical name");
}

BlockKind BlockKind::parse(const std::string& name) {
  for (const KindRow& row : kind_table())
    if (name == row.name) return row.kind;
  std::string known;
  for (const KindRow& row : kind_table()) {
    if (!known.empty()) known += ", ";
    known += row.name;
  }
  throw pctk::ConfigError("unknown block kind '" + name + "' (expected one of: " + known +
                          ")");
}

const std::vector<std::string>& BlockKind::all_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const KindRow& row : kind_table()) out.emplace_back(row.name);
    return out;
  }();
  return names;
}

// ====================================================================
//  Parameters
// ====================================================================

int BlockLayout::rknorm_sets(const BlockKind& kind) const {
  if (kind.solver == Solver::Vanilla || !rk_norm) return 0;
  return per_stage_rknorm ? kind.order() : 2;
}

namespace {

void fill_const(Parameter& p, double v) {
  for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] = v;
}

void fill_normal(Parameter& p, Rng& rng, double stddev) {
  for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] = rng.normal(0.0, stddev);
}

std::string layer_prefix(int idx) { return "layer" + std::to_string(idx) + "."; }

}  // namespace

void register_block_params(ParamStore& store, int idx, const BlockKind& kind,
                           const BlockLayout& layout, Rng& rng, bool layerwise_gamma) {
  kind.validate();
  const int w = layout.width;
  const int hid = layout.hidden_mult * w;
  if (w <= 0 || layout.hidden_mult <= 0)
    throw pctk::ConfigError("register_block_params: width and hidden_mult must be positive");
  const double w_std = 1.0 / std::sqrt(static_cast<double>(w));
  const double hid_std = 1.0 / std::sqrt(static_cast<double>(hid));
  const std::string pre = layer_prefix(idx);

  fill_const(store.create(pre + "ln_attn.g", {w}), 1.0);
  fill_const(store.create(pre + "ln_attn.b", {w}), 0.0);
  fill_normal(store.create(pre + "attn.wq", {w, w}), rng, w_std);
  fill_const(store.create(pre + "attn.bq", {w}), 0.0);
  fill_normal(store.create(pre + "attn.wk", {w, w}), rng, w_std);
  fill_normal(store.create(pre + "attn.wv", {w, w}), rng, w_std);
  fill_const(store.create(pre + "attn.bv", {w}), 0.0);
  fill_normal(store.create(pre + "attn.wo", {w, w}), rng, w_std);
  fill_const(store.create(pre + "attn.bo", {w}), 0.0);
  fill_const(store.create(pre + "ln_ffn.g", {w}), 1.0);
  fill_const(store.create(pre + "ln_ffn.b", {w}), 0.0);
  fill_normal(store.create(pre + "ffn.w1", {w, hid}), rng, w_std);
  fill_const(store.create(pre + "ffn.b1", {hid}), 0.0);
  fill_normal(store.create(pre + "ffn.w2", {hid, w}), rng, hid_std);
  fill_const(store.create(pre + "ffn.b2", {w}), 0.0);

  for (int s = 0; s < layout.rknorm_sets(kind); ++s) {
    const std::string rp = pre + "rknorm" + std::to_string(s) + ".";
    fill_const(store.create(rp + "g", {w}), 1.0);
    fill_const(store.create(rp + "b", {w}), 0.0);
  }
  if (kind.has_corrector_weights()) {
    Parameter& cw = store.create(pre + "corrector.w", {4});
    cw.value[0] = 0.5;
    cw.value[1] = 0.25;
    cw.value[2] = 0.125;
    cw.value[3] = 0.0625;
  }
  if (kind.has_gamma() && layerwise_gamma)
    fill_const(store.create(pre + "gamma_raw", {1}), 0.0);
}

BlockVars bind_block_vars(Tape& tape, ParamStore& store, int idx, const BlockKind& kind,
                          const BlockLayout& layout, bool layerwise_gamma) {
  const std::string pre = layer_prefix(idx);
  BlockVars v;
  v.ln_attn_g = tape.param(store.at(pre + "ln_attn.g"));
  v.ln_attn_b = tape.param(store.at(pre + "ln_attn.b"));
  v.attn.wq = tape.param(store.at(pre + "attn.wq"));
  v.attn.bq = tape.param(store.at(pre + "attn.bq"));
  v.attn.wk = tape.param(store.at(pre + "attn.wk"));
  v.attn.wv = tape.param(store.at(pre + "attn.wv"));
  v.attn.bv = tape.param(store.at(pre + "attn.bv"));
  v.attn.wo = tape.param(store.at(pre + "attn.wo"));
  v.attn.bo = tape.param(store.at(pre + "attn.bo"));
  v.ln_ffn_g = tape.param(store.at(pre + "ln_ffn.g"));
  v.ln_ffn_b = tape.param(store.at(pre + "ln_ffn.b"));
  v.ffn_w1 = tape.param(store.at(pre + "ffn.w1"));
  v.ffn_b1 = tape.param(store.at(pre + "ffn.b1"));
  v.ffn_w2 = tape.param(store.at(pre + "ffn.w2"));
  v.ffn_b2 = tape.param(store.at(pre + "ffn.b2"));
  for (int s = 0; s < layout.rknorm_sets(kind); ++s) {
    const std::string rp = pre + "rknorm" + std::to_string(s) + ".";
    v.rknorm.push_back({tape.param(store.at(rp + "g")), tape.param(store.at(rp + "b"))});
  }
  if (kind.has_corrector_weights()) v.corrector_w = tape.param(store.at(pre + "corrector.w"));
  if (kind.has_gamma() && layerwise_gamma)
    v.gamma_raw = tape.param(store.at(pre + "gamma_raw"));
  return v;
}

// ====================================================================
//  Forward
// ====================================================================

std::vector<Var> ema_weight_vars(Tape& tape, Var gamma_raw, int n) {
  if (!gamma_raw.valid())
    throw pctk::ConfigError("ema_weight_vars: gamma_raw is not bound");
  if (n < 1) throw pctk::ConfigError("ema_weight_vars: n must be positive");
  Var gamma = tape.sigmoid(gamma_raw);
  Var one_minus = tape.constant(1.0) - gamma;
  std::vector<Var> w(static_cast<std::size_t>(n));
  w[static_cast<std::size_t>(n) - 1] = gamma;
  for (int i = n - 2; i >= 0; --i)
    w[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i) + 1] * one_minus;
  return w;
}

Var sublayer(Tape& tape, Var y, const BlockVars& vars, const BlockLayout& layout,
             nnkit::Mode mode, Rng& rng) {
  Var a = tape.layer_norm(y, vars.ln_attn_g, vars.ln_attn_b);
  Var s = tape.attention(a, vars.attn, layout.heads, /*causal=*/true);
  s = tape.dropout(s, layout.dropout, mode, rng);
  Var f = tape.layer_norm(s, vars.ln_ffn_g, vars.ln_ffn_b);
  Var h = tape.relu(tape.add_bias(tape.matmul(f, vars.ffn_w1), vars.ffn_b1));
  h = tape.dropout(h, layout.dropout, mode, rng);
  Var out = tape.add_bias(tape.matmul(h, vars.ffn_w2), vars.ffn_b2);
  return tape.dropout(out, layout.dropout, mode, rng);
}

Var block_forward(Tape& tape, Var y, const BlockKind& kind, const BlockVars& vars,
                  const BlockLayout& layout, LayerState& state, Rng& rng) {
  kind.validate();
  // histories are reset at every forward start; entries recorded through a
  // different tape mean the caller forgot that and would read freed nodes
  if (state.history.size() > 0 && state.history_tape_serial != tape.serial())
    throw pctk::ConfigError(
        "block_forward: layer history holds entries from another tape (reset the "
        "LayerState at forward start)");
  state.history_tape_serial = tape.serial();
  auto raw = [&](const Var& v) {
    return sublayer(tape, v, vars, layout, state.mode, rng);
  };
  if (kind.solver == Solver::Vanilla)
    return block_core(y, kind, raw, raw, std::vector<double>{}, std::vector<double>{},
                      static_cast<odekit::DerivativeHistory<Var>*>(nullptr));

  const int sets = layout.rknorm_sets(kind);
  if (sets > 0 && static_cast<int>(vars.rknorm.size()) < sets)
    throw pctk::ConfigError("block_forward: RK-Norm parameter sets are not bound");
  int stage_no = 0;
  auto staged = [&](const Var& v) -> Var {
    const int i = ++stage_no;
    try {
      Var f = sublayer(tape, v, vars, layout, state.mode, rng);
      if (sets > 0) {
        const auto& set =
            vars.rknorm[static_cast<std::size_t>(layout.per_stage_rknorm ? i - 1
                                                                         : (i - 1) % 2)];
        f = tape.layer_norm(f, set[0], set[1]);
      }
      return f;
    } catch (const pctk::NumericsError& e) {
      throw pctk::NumericsError("block stage " + std::to_string(i) + ": " + e.what());
    }
  };

  const int n = kind.order();
  if (kind.coeff == CoeffMode::Ema) {
    if (!vars.gamma_raw.valid())
      throw pctk::ConfigError("block_forward: ema kind without a bound gamma_raw");
    std::vector<Var> pw = ema_weight_vars(tape, vars.gamma_raw, n);
    std::vector<Var> cw;
    if (kind.has_corrector_weights()) {
      if (!vars.corrector_w.valid())
        throw pctk::ConfigError("block_forward: multistep kind without corrector weights");
      for (int i = 0; i < 4; ++i) cw.push_back(tape.select(vars.corrector_w, i));
    }
    return block_core(y, kind, staged, raw, pw, cw, &state.history);
  }
  std::vector<double> pw = n == 2 ? odekit::CoefficientSchedule::classical_rk2().weights
                                  : odekit::CoefficientSchedule::classical_rk4().weights;
  return block_core(y, kind, staged, raw, pw, std::vector<double>{}, &state.history);
}

bool sublayer_drop_keep(double rate, nnkit::Mode mode, Rng& rng) {
  if (rate < 0.0 || rate > 1.0)
    throw pctk::DomainError("sublayer_drop: rate must lie in [0, 1]");
  if (mode == nnkit::Mode::Eval) return true;
  return rng.uniform() >= rate;
}

}  // namespace pcblock
