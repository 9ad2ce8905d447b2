#pragma once
//
// trainkit — Adam, the warmup/inverse-sqrt schedule, training and evaluation
// loops, and the two desk-scale experiments (block-kind comparison grid,
// coefficient traces).
//
// Everything here is deterministic given (config, seed): the epoch shuffle
// and dropout rngs are seeded from the model seed alone, so two runs of the
// same cell produce byte-identical metrics files.
//

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pctk/lmstack.hpp"
#include "pctk/textdata.hpp"

namespace trainkit {

// ====================================================================
//  Optimizer
// ====================================================================

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.997;
  double eps = 1e-8;
  long long step = 0;                // completed updates
  std::vector<nnkit::Tensor> m, v;   // parallel to the store's items

  bool initialized() const { return !m.empty(); }
};

// One bias-corrected Adam update over every parameter, then zero the grads.
// A non-finite gradient aborts (NumericsError naming the parameter) before
// any parameter or moment is touched.
void adam_update(nnkit::ParamStore& store, AdamState& state, double lr);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(nnkit::ParamStore& store, double max_norm);

// ====================================================================
//  Schedule & config
// ====================================================================

struct TrainConfig {
  double peak_lr = 0.002;
  int warmup_steps = 100;
  int max_steps = 0;
  int batch = 8;        // lanes
  int seq = 32;         // tokens per lane per step
  double clip_norm = 1.0;
  std::vector<std::uint64_t> seeds = {1};  // experiment grids
  int log_interval = 50;
  int eval_batches = 0;  // validation windows per eval; 0 = all

  void validate() const;
};

// Linear warmup 0→peak over warmup_steps, then peak * sqrt(warmup/step).
// step must be >= 1.
double lr_at(long long step, const TrainConfig& cfg);

// ====================================================================
//  Metrics
// ====================================================================

struct MetricsRow {
  long long step = 0;
  std::optional<double> train_loss;  // empty on the step-0 row
  double valid_loss = 0.0;
  double valid_ppl = 0.0;
  std::optional<double> lr;                            // empty on the step-0 row
  std::optional<double> gamma;                         // ema kinds only
  std::optional<std::array<double, 4>> corrector_w;    // multistep kinds only
  double wall_seconds = 0.0;                           // not serialized
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

// ====================================================================
//  Loops
// ====================================================================

struct EvalResult {
  double loss = 0.0;
  double ppl = 0.0;
  int windows = 0;
};

// Mean loss over the first max_windows validation windows (0 = all).
EvalResult evaluate(lmstack::Model& model, const textdata::BatchStream& stream,
                    int max_windows = 0);

struct TrainResult {
  std::vector<MetricsRow> rows;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  long long best_step = 0;
  long long steps_run = 0;
  bool aborted = false;
  std::string abort_reason;
  std::string checkpoint_path;  // best-valid parameters
  std::string metrics_path;
};

// Runs cfg.max_steps updates (0 = just the initial evaluation), logging every
// log_interval steps and at the final step, keeping the best-valid checkpoint
// at <out_dir>/model.pck and the metrics at <out_dir>/metrics.csv. Numerical
// failure aborts the loop but still writes both files.
TrainResult train(lmstack::Model& model, const textdata::BatchStream& train_stream,
                  const textdata::BatchStream& valid_stream, const TrainConfig& cfg,
                  const std::string& out_dir);

// ====================================================================
//  Experiments
// ====================================================================

struct CellResult {
  std::string kind;
  int depth = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string fail_reason;
  double best_valid_ppl = std::numeric_limits<double>::quiet_NaN();
  long long steps = 0;
  std::size_t params = 0;
};

struct MeanRow {
  std::string kind;
  int depth = 0;
  double mean_ppl = std::numeric_limits<double>::quiet_NaN();
  int cells_ok = 0;
};

struct TruncationResult {
  std::vector<CellResult> cells;
  std::vector<MeanRow> means;     // over non-failed cells, per (kind, depth)
  std::string comparison_path;    // <out_dir>/comparison.csv
};

// Trains one model per (kind, depth, seed) on a shared corpus under identical
// budgets and data order per seed. depth must be 1 or 2. A failing cell is
// recorded and the grid continues. base gives everything about the model
// except block_kind, layers, seed and vocab_size, which the grid overrides
// (vocab_size acts as the cap for the vocab built at `level`).
TruncationResult truncation_experiment(const std::string& corpus_text,
                                       const std::vector<std::string>& kinds,
                                       const std::vector<int>& depths,
                                       const lmstack::ModelConfig& base,
                                       const TrainConfig& cfg,
                                       const std::string& out_dir,
                                       textdata::Level level = textdata::Level::Char);

// Derives the effective stage-weight trajectory w_i = gamma*(1-gamma)^(n-i)
// from the gamma column of a metrics stream (order = stage count n). Appends
// the raw corrector weights when the stream logged them. Rows without a
// logged gamma are skipped; a stream with none at all is a contract error.
std::string coeff_trace_csv(const std::vector<MetricsRow>& rows, int order);

}  // namespace trainkit
