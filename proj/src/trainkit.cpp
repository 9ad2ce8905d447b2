#include "pctk/trainkit.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace trainkit {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v.has_value() ? fmt(*v) : std::string();
}

}  // namespace

// ====================================================================
//  Optimizer
// ====================================================================

void adam_update(nnkit::ParamStore& store, AdamState& state, double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw pctk::ConfigError("adam_update: lr must be positive and finite");

  if (!state.initialized()) {
    state.m.reserve(store.size());
    state.v.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      state.m.emplace_back(store.item(i).value.shape());
      state.v.emplace_back(store.item(i).value.shape());
    }
  }
  if (state.m.size() != store.size())
    throw pctk::ConfigError("adam_update: store size changed under the optimizer");

  // Abort before touching anything if any gradient is bad.
  for (std::size_t i = 0; i < store.size(); ++i) {
    const nnkit::Parameter& p = store.item(i);
    if (!p.grad.same_shape(p.value))
      throw pctk::ShapeError("adam_update: gradient shape mismatch for '" + p.name +
                             "'");
    if (!p.grad.all_finite())
      throw pctk::NumericsError("non-finite gradient in parameter '" + p.name + "'");
  }

  const long long t = state.step + 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));

  for (std::size_t i = 0; i < store.size(); ++i) {
    nnkit::Parameter& p = store.item(i);
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    double* val = p.value.data();
    double* g = p.grad.data();
    const std::size_t n = p.value.numel();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      val[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      g[k] = 0.0;
    }
  }
  state.step = t;
}

double clip_global_norm(nnkit::ParamStore& store, double max_norm) {
  if (!(max_norm > 0.0))
    throw pctk::ConfigError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i)
    for (double g : store.item(i).grad.vec()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (std::size_t i = 0; i < store.size(); ++i)
      for (double& g : store.item(i).grad.vec()) g *= scale;
  }
  return norm;
}

// ====================================================================
//  Schedule & config
// ====================================================================

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0)) throw pctk::ConfigError("peak_lr must be positive");
  if (warmup_steps < 1) throw pctk::ConfigError("warmup_steps must be at least 1");
  if (max_steps < 0) throw pctk::ConfigError("max_steps must be non-negative");
  if (batch < 1 || seq < 1) throw pctk::ConfigError("batch and seq must be positive");
  if (!(clip_norm > 0.0)) throw pctk::ConfigError("clip_norm must be positive");
  if (log_interval < 1) throw pctk::ConfigError("log_interval must be at least 1");
  if (eval_batches < 0) throw pctk::ConfigError("eval_batches must be non-negative");
  if (seeds.empty()) throw pctk::ConfigError("seeds must not be empty");
}

double lr_at(long long step, const TrainConfig& cfg) {
  if (step < 1) throw pctk::DomainError("lr_at: step must be >= 1");
  const double warmup = static_cast<double>(cfg.warmup_steps);
  if (step <= cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / warmup;
  return cfg.peak_lr * std::sqrt(warmup / static_cast<double>(step));
}

// ====================================================================
//  Metrics
// ====================================================================

std::string metrics_csv_header() {
  return "step,train_loss,valid_loss,valid_ppl,lr,gamma,"
         "corrector_w1,corrector_w2,corrector_w3,corrector_w4";
}

std::string metrics_csv_row(const MetricsRow& row) {
  std::ostringstream out;
  out << row.step << ',' << fmt_opt(row.train_loss) << ',' << fmt(row.valid_loss)
      << ',' << fmt(row.valid_ppl) << ',' << fmt_opt(row.lr) << ','
      << fmt_opt(row.gamma);
  for (int i = 0; i < 4; ++i) {
    out << ',';
    if (row.corrector_w.has_value()) out << fmt((*row.corrector_w)[static_cast<std::size_t>(i)]);
  }
  return out.str();
}

// ====================================================================
//  Loops
// ====================================================================

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::optional<double> current_gamma(const lmstack::Model& model) {
  const nnkit::ParamStore& store = model.store();
  if (store.contains("gamma_raw")) return sigmoid(store.at("gamma_raw").value[0]);
  if (store.contains("layer0.gamma_raw"))
    return sigmoid(store.at("layer0.gamma_raw").value[0]);
  return std::nullopt;
}

std::optional<std::array<double, 4>> current_corrector(const lmstack::Model& model) {
  const nnkit::ParamStore& store = model.store();
  if (!store.contains("layer0.corrector.w")) return std::nullopt;
  const nnkit::Tensor& w = store.at("layer0.corrector.w").value;
  return std::array<double, 4>{w[0], w[1], w[2], w[3]};
}

void write_metrics_file(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << metrics_csv_header() << '\n';
  for (const MetricsRow& r : rows) out << metrics_csv_row(r) << '\n';
  pctk::write_text_file(path, out.str());
}

std::vector<int> epoch_permutation(int windows, std::uint64_t seed, long long epoch) {
  std::vector<int> perm(static_cast<std::size_t>(windows));
  std::iota(perm.begin(), perm.end(), 0);
  nnkit::Rng rng(seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch + 1));
  for (int i = windows - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

}  // namespace

EvalResult evaluate(lmstack::Model& model, const textdata::BatchStream& stream,
                    int max_windows) {
  if (max_windows < 0) throw pctk::ConfigError("evaluate: max_windows must be >= 0");
  const int total = stream.num_windows();
  const int n = max_windows == 0 ? total : std::min(total, max_windows);
  if (n < 1) throw pctk::DataError("evaluate: stream has no windows");

  nnkit::Rng rng(0);  // untouched in eval mode
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const textdata::Batch b = stream.window(i);
    nnkit::Tape tape;
    nnkit::Var logits =
        model.forward(tape, b.inputs, b.batch, b.seq, nnkit::Mode::Eval, rng);
    sum += lmstack::loss_and_ppl(tape, logits, b.targets).loss_value;
  }
  EvalResult r;
  r.loss = sum / static_cast<double>(n);
  r.ppl = std::exp(r.loss);
  r.windows = n;
  return r;
}

TrainResult train(lmstack::Model& model, const textdata::BatchStream& train_stream,
                  const textdata::BatchStream& valid_stream, const TrainConfig& cfg,
                  const std::string& out_dir) {
  cfg.validate();
  if (train_stream.batch_size() != cfg.batch || train_stream.seq_len() != cfg.seq)
    throw pctk::ConfigError("train: stream geometry does not match the config");
  if (cfg.seq > model.config().max_seq_len)
    throw pctk::ConfigError("train: seq exceeds the model's max_seq_len");

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint_path = out_dir + "/model.pck";
  result.metrics_path = out_dir + "/metrics.csv";

  const std::uint64_t seed = model.config().seed;
  nnkit::Rng forward_rng(seed + 0x517CC1B727220A95ull);
  AdamState adam;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  const auto log_row = [&](long long step, std::optional<double> train_loss,
                           std::optional<double> lr) {
    const EvalResult ev = evaluate(model, valid_stream, cfg.eval_batches);
    MetricsRow row;
    row.step = step;
    row.train_loss = train_loss;
    row.valid_loss = ev.loss;
    row.valid_ppl = ev.ppl;
    row.lr = lr;
    row.gamma = current_gamma(model);
    row.corrector_w = current_corrector(model);
    row.wall_seconds = elapsed();
    result.rows.push_back(row);
    if (ev.loss < result.best_valid_loss) {
      result.best_valid_loss = ev.loss;
      result.best_valid_ppl = ev.ppl;
      result.best_step = step;
      nnkit::save_checkpoint(model.store(), result.checkpoint_path);
    }
  };

  log_row(0, std::nullopt, std::nullopt);

  const int windows = train_stream.num_windows();
  std::vector<int> perm;
  for (long long step = 1; step <= cfg.max_steps; ++step) {
    const long long pos = (step - 1) % windows;
    if (pos == 0) perm = epoch_permutation(windows, seed, (step - 1) / windows);
    const textdata::Batch b = train_stream.window(perm[static_cast<std::size_t>(pos)]);

    try {
      nnkit::Tape tape;
      nnkit::Var logits =
          model.forward(tape, b.inputs, b.batch, b.seq, nnkit::Mode::Train, forward_rng);
      const lmstack::LossResult loss = lmstack::loss_and_ppl(tape, logits, b.targets);
      if (!std::isfinite(loss.loss_value))
        throw pctk::NumericsError("training loss is not finite at step " +
                                  std::to_string(step));
      tape.backward(loss.loss);
      tape.flush_param_grads();
      clip_global_norm(model.store(), cfg.clip_norm);
      const double lr = lr_at(step, cfg);
      adam_update(model.store(), adam, lr);
      result.steps_run = step;

      if (step % cfg.log_interval == 0 || step == cfg.max_steps)
        log_row(step, loss.loss_value, lr);
    } catch (const pctk::NumericsError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      break;
    }
  }

  write_metrics_file(result.metrics_path, result.rows);
  return result;
}

// ====================================================================
//  Experiments
// ====================================================================

TruncationResult truncation_experiment(const std::string& corpus_text,
                                       const std::vector<std::string>& kinds,
                                       const std::vector<int>& depths,
                                       const lmstack::ModelConfig& base,
                                       const TrainConfig& cfg,
                                       const std::string& out_dir,
                                       textdata::Level level) {
  cfg.validate();
  if (kinds.empty()) throw pctk::ConfigError("truncation_experiment: no kinds given");
  if (depths.empty()) throw pctk::ConfigError("truncation_experiment: no depths given");
  for (const std::string& k : kinds) pcblock::BlockKind::parse(k);
  for (int d : depths)
    if (d != 1 && d != 2)
      throw pctk::ConfigError("truncation_experiment: depth must be 1 or 2 (got " +
                              std::to_string(d) + ")");

  std::filesystem::create_directories(out_dir);

  auto [train_text, valid_text] = textdata::split_train_valid(corpus_text);
  textdata::Vocab vocab = textdata::Vocab::build(train_text, level, base.vocab_size);
  vocab.save(out_dir + "/vocab.tsv");
  const textdata::BatchStream train_stream(vocab.encode(train_text), cfg.batch, cfg.seq);
  const textdata::BatchStream valid_stream(vocab.encode(valid_text), cfg.batch, cfg.seq);

  TruncationResult result;
  result.comparison_path = out_dir + "/comparison.csv";

  for (const std::string& kind : kinds) {
    for (int depth : depths) {
      for (std::uint64_t seed : cfg.seeds) {
        CellResult cell;
        cell.kind = kind;
        cell.depth = depth;
        cell.seed = seed;

        lmstack::ModelConfig mc = base;
        mc.vocab_size = vocab.size();
        mc.block_kind = kind;
        mc.layers = depth;
        mc.seed = seed;

        const std::string cell_dir = out_dir + "/" + kind + "-d" +
                                     std::to_string(depth) + "-s" +
                                     std::to_string(seed);
        try {
          lmstack::Model model(mc);
          cell.params = model.store().total_params();
          TrainResult tr = train(model, train_stream, valid_stream, cfg, cell_dir);
          cell.steps = tr.steps_run;
          if (tr.aborted) {
            cell.failed = true;
            cell.fail_reason = tr.abort_reason;
          } else {
            cell.best_valid_ppl = tr.best_valid_ppl;
          }
        } catch (const std::exception& e) {
          cell.failed = true;
          cell.fail_reason = e.what();
        }
        result.cells.push_back(cell);
      }
    }
  }

  // Per-(kind, depth) means over the surviving cells.
  for (const std::string& kind : kinds) {
    for (int depth : depths) {
      MeanRow mean;
      mean.kind = kind;
      mean.depth = depth;
      double sum = 0.0;
      for (const CellResult& c : result.cells) {
        if (c.kind == kind && c.depth == depth && !c.failed) {
          sum += c.best_valid_ppl;
          ++mean.cells_ok;
        }
      }
      if (mean.cells_ok > 0) mean.mean_ppl = sum / mean.cells_ok;
      result.means.push_back(mean);
    }
  }

  std::ostringstream out;
  out << "kind,depth,seed,best_valid_ppl,steps,params\n";
  for (const CellResult& c : result.cells) {
    out << c.kind << ',' << c.depth << ',' << c.seed << ',';
    if (!c.failed) out << fmt(c.best_valid_ppl);
    out << ',' << c.steps << ',' << c.params << '\n';
  }
  pctk::write_text_file(result.comparison_path, out.str());
  return result;
}

std::string coeff_trace_csv(const std::vector<MetricsRow>& rows, int order) {
  if (order < 1) throw pctk::ConfigError("coeff_trace: order must be positive");
  bool any_gamma = false;
  for (const MetricsRow& r : rows) any_gamma = any_gamma || r.gamma.has_value();
  if (!any_gamma)
    throw pctk::ConfigError(
        "coeff_trace: the metrics stream has no logged gamma (not an ema model)");

  bool with_corrector = false;
  for (const MetricsRow& r : rows)
    with_corrector = with_corrector || r.corrector_w.has_value();

  std::ostringstream out;
  out << "step,gamma";
  for (int i = 1; i <= order; ++i) out << ",w" << i;
  if (with_corrector)
    out << ",corrector_w1,corrector_w2,corrector_w3,corrector_w4";
  out << '\n';

  for (const MetricsRow& r : rows) {
    if (!r.gamma.has_value()) continue;
    const double g = *r.gamma;
    out << r.step << ',' << fmt(g);
    for (int i = 1; i <= order; ++i)
      out << ',' << fmt(g * std::pow(1.0 - g, static_cast<double>(order - i)));
    if (with_corrector) {
      for (int i = 0; i < 4; ++i) {
        out << ',';
        if (r.corrector_w.has_value()) out << fmt((*r.corrector_w)[static_cast<std::size_t>(i)]);
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace trainkit
