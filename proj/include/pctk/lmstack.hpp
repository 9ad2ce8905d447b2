#pragma once
//
// lmstack — decoder-only language model built from pc-blocks:
//
//   tokens → tok-embedding + learned pos-embedding → L blocks → LN → head
//
// One forward pass lives on one Tape; the layer stack shares a single
// LayerState whose derivative history is reset at the start of every call.
// The parameter store layout (and therefore the checkpoint layout) is fixed
// by the registration order in Model's constructor.
//

#include <string>
#include <utility>
#include <vector>

#include "pctk/nnkit/gradcheck.hpp"
#include "pctk/nnkit/param.hpp"
#include "pctk/nnkit/rng.hpp"
#include "pctk/nnkit/tape.hpp"
#include "pctk/pcblock.hpp"

namespace lmstack {

// ====================================================================
//  ModelConfig
// ====================================================================

struct ModelConfig {
  int vocab_size = 0;
  int width = 0;
  int heads = 1;
  int layers = 1;
  int hidden_mult = 4;
  std::string block_kind = "vanilla";
  double dropout = 0.0;
  double sublayer_drop = 0.0;
  int max_seq_len = 256;
  std::uint64_t seed = 0;
  bool layerwise_gamma = false;
  bool per_stage_rknorm = false;
  bool rk_norm = true;

  // layers == 0 is the documented degenerate model head(LN(embed(tokens))).
  void validate() const;

  pcblock::BlockKind kind() const { return pcblock::BlockKind::parse(block_kind); }
  pcblock::BlockLayout layout() const;

  // One flat JSON object with exactly the field names above. Parsing is
  // strict: an unknown key raises ConfigError naming it. vocab_size, width
  // and block_kind are required; the rest default as declared here.
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  static const std::vector<std::string>& field_names();
};

// ====================================================================
//  Model
// ====================================================================

class Model {
 public:
  explicit Model(ModelConfig cfg);  // validates, registers and initializes

  const ModelConfig& config() const { return cfg_; }
  nnkit::ParamStore& store() { return store_; }
  const nnkit::ParamStore& store() const { return store_; }

  // Closed-form store size for a config; the constructor asserts it matches.
  static std::size_t expected_param_count(const ModelConfig& cfg);

  // tokens is [batch, seq] row-major; returns logits [batch, seq, vocab].
  // The rng only advances in Train mode (dropout / sublayer-drop coins).
  nnkit::Var forward(nnkit::Tape& tape, const std::vector<int>& tokens, int batch,
                     int seq, nnkit::Mode mode, nnkit::Rng& rng);

 private:
  ModelConfig cfg_;
  pcblock::BlockKind kind_;
  nnkit::ParamStore store_;
};

// ====================================================================
//  Loss
// ====================================================================

struct LossResult {
  nnkit::Var loss;  // [1] node, ready for tape.backward
  double loss_value = 0.0;
  double ppl = 0.0;  // exp(loss_value)
};

// Mean token-level cross entropy over every position; targets are the
// stream successors of the inputs, length batch*seq.
LossResult loss_and_ppl(nnkit::Tape& tape, nnkit::Var logits,
                        const std::vector<int>& targets);

}  // namespace lmstack
