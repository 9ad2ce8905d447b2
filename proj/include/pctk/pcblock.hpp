#pragma once
//
// pcblock — predictor-corrector transformer blocks.
//
// A block advances the residual stream y with an explicit ODE step whose
// vector field is the merged attention+FFN sublayer
//
//   F(y) = FFN(LN_f(SAN(LN_a(y))))        (no internal residual)
//
// and the solver combinators own all residual structure:
//
//   vanilla      y + F(y)                         (pre-norm residual)
//   rk2 / rk4    weighted multi-stage steps, classical or EMA weights
//   pc-*         the rk step only *predicts* P; F is evaluated once more at
//                P and a multistep (learned 4-weight) or backward-Euler
//                correction produces the output. The raw F(P) is pushed to a
//                derivative history shared along the layer stack so deeper
//                layers can use it as multistep history.
//
// Stage values are layer-normalized ("RK-Norm") before they are combined or
// offset later stage inputs; the corrector's F(P) and the history stay raw.
//

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pctk/nnkit/tape.hpp"
#include "pctk/odekit.hpp"

namespace pcblock {

// ====================================================================
//  BlockKind
// ====================================================================

enum class Solver { Vanilla, Rk2, Rk4 };
enum class CoeffMode { Classical, Ema };
enum class Corrector { None, Multistep, BackwardEuler };

struct BlockKind {
  Solver solver = Solver::Vanilla;
  CoeffMode coeff = CoeffMode::Classical;
  Corrector corrector = Corrector::None;

  int order() const { return solver == Solver::Rk4 ? 4 : solver == Solver::Rk2 ? 2 : 1; }
  bool has_gamma() const { return coeff == CoeffMode::Ema; }
  bool has_corrector_weights() const { return corrector == Corrector::Multistep; }
  bool is_pc() const { return corrector != Corrector::None; }

  void validate() const;  // ConfigError on combinations outside the table
  std::string str() const;
  static BlockKind parse(const std::string& name);
  static const std::vector<std::string>& all_names();

  friend bool operator==(const BlockKind& a, const BlockKind& b) {
    return a.solver == b.solver && a.coeff == b.coeff && a.corrector == b.corrector;
  }
};

// ====================================================================
//  Geometry and parameters
// ====================================================================

struct BlockLayout {
  int width = 0;
  int heads = 1;
  int hidden_mult = 4;
  double dropout = 0.0;  // applied after SAN output, after FFN ReLU, on FFN output
  bool rk_norm = true;   // normalize solver stages (ignored by vanilla)
  bool per_stage_rknorm = false;  // dedicated LN per stage instead of a reused pair

  // Number of RK-Norm gain/bias sets this layout owns for `kind`.
  int rknorm_sets(const BlockKind& kind) const;
};

// Creates and initializes every per-layer tensor under "layer<idx>." — LN
// gains 1 / biases 0, linear weights ~ N(0, 1/fan_in), linear biases 0,
// corrector weights [0.5, 0.25, 0.125, 0.0625] newest-first, gamma_raw 0
// (layerwise only; a model-shared "gamma_raw" belongs to the caller).
void register_block_params(nnkit::ParamStore& store, int idx, const BlockKind& kind,
                           const BlockLayout& layout, nnkit::Rng& rng,
                           bool layerwise_gamma = false);

// Tape-bound handles for one layer's parameters.
struct BlockVars {
  nnkit::Var ln_attn_g, ln_attn_b;
  nnkit::AttentionParams attn;
  nnkit::Var ln_ffn_g, ln_ffn_b;
  nnkit::Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  std::vector<std::array<nnkit::Var, 2>> rknorm;  // {gain, bias} per set
  nnkit::Var gamma_raw;    // bound here when layerwise, else set by the caller
  nnkit::Var corrector_w;  // [4] newest-first (multistep kinds)
};

BlockVars bind_block_vars(nnkit::Tape& tape, nnkit::ParamStore& store, int idx,
                          const BlockKind& kind, const BlockLayout& layout,
                          bool layerwise_gamma = false);

// ====================================================================
//  Forward pieces
// ====================================================================

// Per-forward-pass mutable state for a whole layer stack: one bounded raw-F
// history shared by the layers, cleared at every forward start. The tape
// serial stamps which tape the stored Vars belong to, so a forgotten reset
// fails loudly instead of reading freed nodes.
struct LayerState {
  odekit::DerivativeHistory<nnkit::Var> history{3};
  nnkit::Mode mode = nnkit::Mode::Eval;
  std::uint64_t history_tape_serial = 0;

  void reset() {
    history.clear();
    history_tape_serial = 0;
  }
};

// Stage weights as tape nodes: gamma = sigmoid(gamma_raw), w[n-1] = gamma,
// w[i] = w[i+1] * (1 - gamma). Oldest stage first, matching odekit.
std::vector<nnkit::Var> ema_weight_vars(nnkit::Tape& tape, nnkit::Var gamma_raw, int n);

// F(y) = FFN(LN_f(SAN(LN_a(y)))); dropout active in train mode only.
nnkit::Var sublayer(nnkit::Tape& tape, nnkit::Var y, const BlockVars& vars,
                    const BlockLayout& layout, nnkit::Mode mode, nnkit::Rng& rng);

// One full block step. Throws NumericsError naming the stage index if a
// stage evaluation produces non-finite values (the RK-Norm-off failure mode).
nnkit::Var block_forward(nnkit::Tape& tape, nnkit::Var y, const BlockKind& kind,
                         const BlockVars& vars, const BlockLayout& layout,
                         LayerState& state, nnkit::Rng& rng);

// Whole-block skip: in train mode the block is skipped (state untouched, y
// returned) with probability `rate`. The coin is drawn before any compute.
bool sublayer_drop_keep(double rate, nnkit::Mode mode, nnkit::Rng& rng);

// ====================================================================
//  block_core — the step skeleton, shared with the scalar oracle tests
// ====================================================================

// staged : stage field used by the solver (normalized when RK-Norm is on)
// raw    : plain F, evaluated once at the predicted point for pc kinds
// Weight : double for frozen coefficients, nnkit::Var for learned ones.
// history: required for multistep kinds; raw F(P) is pushed for every pc
//          kind when a history is supplied.
template <class State, class Staged, class Raw, class Weight>
State block_core(const State& y, const BlockKind& kind, Staged&& staged, Raw&& raw,
                 const std::vector<Weight>& predictor_w,
                 const std::vector<Weight>& corrector_w,
                 odekit::DerivativeHistory<State>* history) {
  kind.validate();
  if (kind.solver == Solver::Vanilla) return odekit::euler_step(y, raw).next_state;

  odekit::StepResult<State> pred =
      kind.order() == 2 ? odekit::rk2_step_weighted(y, staged, predictor_w)
                        : odekit::rk4_step_weighted(y, staged, predictor_w);
  if (kind.corrector == Corrector::None) return pred.next_state;

  State f_new = raw(pred.next_state);
  State out = y;
  if (kind.corrector == Corrector::Multistep) {
    if (history == nullptr)
      throw pctk::ConfigError("block_core: multistep corrector requires a history");
    out = odekit::am4_correct_weighted(y, f_new, *history, corrector_w);
  } else {
    out = odekit::backward_euler_correct(y, f_new);
  }
  if (history != nullptr) history->push(std::move(f_new));
  return out;
}

}  // namespace pcblock
