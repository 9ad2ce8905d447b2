//
// pctk — single command-line entry point for the toolkit.
//
// Subcommands: ode-validate, gradcheck, train, eval, truncation, coeff-trace.
// Exit codes: 0 = success / check passed, 2 = usage or configuration error,
// 3 = numerical failure (divergence, failed tolerance or order band).
//

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pctk/lmstack.hpp"
#include "pctk/odelab.hpp"
#include "pctk/trainkit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ====================================================================
//  RunConfig — one JSON object holding model + training + run keys
// ====================================================================

struct RunConfig {
  lmstack::ModelConfig model;
  trainkit::TrainConfig train;
  std::string corpus;   // path; required by train/truncation
  std::string out_dir;  // required by train/truncation
  std::string vocab_level = "char";

  static const std::vector<std::string>& train_field_names() {
    static const std::vector<std::string> names = {
        "peak_lr", "warmup_steps", "max_steps",     "batch",       "seq",
        "clip_norm", "seeds",      "log_interval",  "eval_batches"};
    return names;
  }
  static const std::vector<std::string>& run_field_names() {
    static const std::vector<std::string> names = {"corpus", "out_dir", "vocab_level"};
    return names;
  }

  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path) {
    return from_json_text(pctk::read_text_file(path));
  }
  std::string to_json() const;  // fully resolved, every key explicit
};

bool name_in(const std::vector<std::string>& names, const std::string& key) {
  for (const auto& n : names)
    if (n == key) return true;
  return false;
}

int take_int(const json& j, const char* key, int def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_number_integer())
    throw pctk::ConfigError(std::string("config key '") + key + "' must be an integer");
  return it->get<int>();
}

double take_double(const json& j, const char* key, double def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_number())
    throw pctk::ConfigError(std::string("config key '") + key + "' must be a number");
  return it->get<double>();
}

std::string take_string(const json& j, const char* key, const std::string& def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_string())
    throw pctk::ConfigError(std::string("config key '") + key + "' must be a string");
  return it->get<std::string>();
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw pctk::ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw pctk::ConfigError("config must be a JSON object");

  json model_part = json::object();
  for (const auto& item : j.items()) {
    const std::string& key = item.key();
    if (name_in(lmstack::ModelConfig::field_names(), key)) {
      model_part[key] = item.value();
    } else if (!name_in(train_field_names(), key) && !name_in(run_field_names(), key)) {
      throw pctk::ConfigError("unknown config key '" + key + "'");
    }
  }

  RunConfig rc;
  rc.model = lmstack::ModelConfig::from_json(model_part.dump());
  rc.train.peak_lr = take_double(j, "peak_lr", rc.train.peak_lr);
  rc.train.warmup_steps = take_int(j, "warmup_steps", rc.train.warmup_steps);
  rc.train.max_steps = take_int(j, "max_steps", rc.train.max_steps);
  rc.train.batch = take_int(j, "batch", rc.train.batch);
  rc.train.seq = take_int(j, "seq", rc.train.seq);
  rc.train.clip_norm = take_double(j, "clip_norm", rc.train.clip_norm);
  rc.train.log_interval = take_int(j, "log_interval", rc.train.log_interval);
  rc.train.eval_batches = take_int(j, "eval_batches", rc.train.eval_batches);
  if (auto it = j.find("seeds"); it != j.end()) {
    if (!it->is_array()) throw pctk::ConfigError("config key 'seeds' must be an array");
    rc.train.seeds.clear();
    for (const auto& s : *it) {
      if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() &&
                                     s.get<long long>() < 0))
        throw pctk::ConfigError("config key 'seeds' must hold non-negative integers");
      rc.train.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  rc.corpus = take_string(j, "corpus", "");
  rc.out_dir = take_string(j, "out_dir", "");
  rc.vocab_level = take_string(j, "vocab_level", rc.vocab_level);
  textdata::parse_level(rc.vocab_level);  // validates
  rc.train.validate();
  return rc;
}

std::string RunConfig::to_json() const {
  ordered_json j = ordered_json::parse(model.to_json());
  j["peak_lr"] = train.peak_lr;
  j["warmup_steps"] = train.warmup_steps;
  j["max_steps"] = train.max_steps;
  j["batch"] = train.batch;
  j["seq"] = train.seq;
  j["clip_norm"] = train.clip_norm;
  j["seeds"] = train.seeds;
  j["log_interval"] = train.log_interval;
  j["eval_batches"] = train.eval_batches;
  j["corpus"] = corpus;
  j["out_dir"] = out_dir;
  j["vocab_level"] = vocab_level;
  return j.dump(2) + "\n";
}

// ====================================================================
//  Manifest
// ====================================================================

void write_run_artifacts(const std::string& out_dir, const RunConfig& rc,
                         const std::string& command) {
  fs::create_directories(out_dir);
  const std::string resolved = rc.to_json();
  pctk::write_text_file(out_dir + "/config.json", resolved);

  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(pctk::fnv1a64(resolved)));
  ordered_json m;
  m["command"] = command;
  m["config_hash"] = hash;
  m["seed"] = rc.model.seed;
  m["versions"] = {{"toolkit", kToolVersion},
                   {"checkpoint_format", "PCK1"},
                   {"config_schema", 1},
                   {"metrics_schema", 1}};
  pctk::write_text_file(out_dir + "/manifest.json", m.dump(2) + "\n");
}

// ====================================================================
//  Subcommand bodies (throw pctk errors; main maps them to exit codes)
// ====================================================================

int cmd_ode_validate(const std::string& method_name, const std::string& problem_name,
                     double h0, int levels, const std::string& out_path) {
  const odelab::Method method = odelab::method_by_name(method_name);
  const odelab::TestProblem problem = odelab::problem_by_name(problem_name);
  if (levels < 2) throw pctk::ConfigError("--levels must be at least 2");
  const double step0 = h0 > 0.0 ? h0 : problem.horizon / 32.0;

  const odelab::OrderReport report = odelab::empirical_order(problem, method, step0, levels);
  const odelab::OrderBand band = odelab::order_band(method);
  const double p_hat = report.estimated_order();

  std::printf("method=%s problem=%s\n", report.method.c_str(), report.problem.c_str());
  std::printf("%-14s %-22s %s\n", "h", "max_err", "p_hat");
  for (const auto& level : report.levels)
    std::printf("%-14g %-22.14e %s\n", level.h, level.err,
                level.has_p_hat ? fmt(level.p_hat).c_str() : "-");
  std::printf("estimated_order=%s band=[%g, %g]%s\n", fmt(p_hat).c_str(), band.lo,
              band.hi, report.underflow_truncated ? " (error floor reached)" : "");

  if (!out_path.empty()) pctk::write_text_file(out_path, report.to_csv());
  if (p_hat < band.lo || p_hat > band.hi) {
    std::fprintf(stderr, "order estimate %s outside band [%g, %g]\n", fmt(p_hat).c_str(),
                 band.lo, band.hi);
    return 3;
  }
  return 0;
}

int cmd_gradcheck(const std::string& block, int width, int seq, int samples,
                  std::uint64_t seed) {
  pcblock::BlockKind::parse(block);  // usage error on bad names
  if (samples < 1) throw pctk::ConfigError("--samples must be at least 1");
  if (width < 1 || seq < 1) throw pctk::ConfigError("--width and --seq must be positive");

  lmstack::ModelConfig cfg;
  cfg.vocab_size = 29;
  cfg.width = width;
  cfg.heads = width % 4 == 0 ? 4 : width % 2 == 0 ? 2 : 1;
  cfg.layers = 1;
  cfg.hidden_mult = 4;
  cfg.block_kind = block;
  cfg.max_seq_len = seq;
  cfg.seed = seed;
  lmstack::Model model(cfg);

  const int batch = 2;
  nnkit::Rng data_rng(seed + 1);
  std::vector<int> tokens, targets;
  for (int i = 0; i < batch * seq; ++i) {
    tokens.push_back(static_cast<int>(data_rng.uniform_index(29)));
    targets.push_back(static_cast<int>(data_rng.uniform_index(29)));
  }

  auto loss_fn = [&](bool do_backward) {
    nnkit::Tape tape;
    nnkit::Rng rng(0);
    nnkit::Var logits = model.forward(tape, tokens, batch, seq, nnkit::Mode::Eval, rng);
    const lmstack::LossResult r = lmstack::loss_and_ppl(tape, logits, targets);
    if (do_backward) {
      tape.backward(r.loss);
      tape.flush_param_grads();
    }
    return r.loss_value;
  };

  nnkit::Rng pick(seed + 2);
  const nnkit::GradCheckReport report =
      nnkit::grad_check(loss_fn, model.store(), samples, pick);
  std::printf("block=%s width=%d seq=%d samples=%d\n", block.c_str(), width, seq,
              report.samples);
  std::printf("max_rel_err=%s worst_param=%s[%zu] ad=%s fd=%s\n",
              fmt(report.max_rel_err).c_str(), report.worst_param.c_str(),
              report.worst_index, fmt(report.worst_ad).c_str(),
              fmt(report.worst_fd).c_str());
  if (report.max_rel_err > 1e-4) {
    std::fprintf(stderr, "gradient check failed: %s > 1e-4\n",
                 fmt(report.max_rel_err).c_str());
    return 3;
  }
  return 0;
}

// Shared by train and truncation: load the corpus, split, build the vocab
// capped at the configured vocab_size, and pin the actual size back into rc.
struct PreparedData {
  textdata::Vocab vocab;
  std::vector<int> train_ids, valid_ids;
};

PreparedData prepare_data(RunConfig& rc) {
  if (rc.corpus.empty()) throw pctk::ConfigError("missing required config key 'corpus'");
  if (rc.out_dir.empty()) throw pctk::ConfigError("missing required config key 'out_dir'");
  const std::string text = pctk::read_text_file(rc.corpus);
  auto [train_text, valid_text] = textdata::split_train_valid(text);
  PreparedData d;
  d.vocab = textdata::Vocab::build(train_text, textdata::parse_level(rc.vocab_level),
                                   rc.model.vocab_size);
  d.train_ids = d.vocab.encode(train_text);
  d.valid_ids = d.vocab.encode(valid_text);
  rc.model.vocab_size = d.vocab.size();  // resolved to the actual size
  return d;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed_override) {
  RunConfig rc = RunConfig::from_file(config_path);
  if (seed_override.has_value()) rc.model.seed = *seed_override;
  if (rc.model.layers < 1)
    throw pctk::ConfigError("train requires layers >= 1");

  PreparedData data = prepare_data(rc);
  const textdata::BatchStream train_stream(data.train_ids, rc.train.batch, rc.train.seq);
  const textdata::BatchStream valid_stream(data.valid_ids, rc.train.batch, rc.train.seq);

  write_run_artifacts(rc.out_dir, rc, "train");
  data.vocab.save(rc.out_dir + "/vocab.tsv");

  lmstack::Model model(rc.model);
  std::printf("training %s: %zu parameters, %d steps\n", rc.model.block_kind.c_str(),
              model.store().total_params(), rc.train.max_steps);
  const trainkit::TrainResult result =
      trainkit::train(model, train_stream, valid_stream, rc.train, rc.out_dir);

  for (const trainkit::MetricsRow& row : result.rows)
    std::printf("%s\n", trainkit::metrics_csv_row(row).c_str());
  std::printf("best: step=%lld valid_loss=%s valid_ppl=%s\n", result.best_step,
              fmt(result.best_valid_loss).c_str(), fmt(result.best_valid_ppl).c_str());
  std::printf("wrote %s and %s\n", result.metrics_path.c_str(),
              result.checkpoint_path.c_str());
  if (result.aborted) {
    std::fprintf(stderr, "run aborted: %s (best checkpoint retained)\n",
                 result.abort_reason.c_str());
    return 3;
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& corpus_path) {
  const fs::path dir = fs::path(ckpt_path).parent_path();
  RunConfig rc = RunConfig::from_file((dir / "config.json").string());
  textdata::Vocab vocab = textdata::Vocab::load((dir / "vocab.tsv").string());
  if (vocab.size() != rc.model.vocab_size)
    throw pctk::DataError("vocab.tsv size does not match the run config");

  lmstack::Model model(rc.model);
  nnkit::load_checkpoint(model.store(), ckpt_path);

  const std::string text = pctk::read_text_file(corpus_path);
  auto [train_text, valid_text] = textdata::split_train_valid(text);
  (void)train_text;
  const textdata::BatchStream stream(vocab.encode(valid_text), rc.train.batch,
                                     rc.train.seq);
  const trainkit::EvalResult r =
      trainkit::evaluate(model, stream, rc.train.eval_batches);
  std::printf("windows=%d valid_loss=%s valid_ppl=%s\n", r.windows, fmt(r.loss).c_str(),
              fmt(r.ppl).c_str());
  return 0;
}

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  for (const std::string& part : pctk::split(s, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

int cmd_truncation(const std::string& config_path, const std::string& blocks,
                   const std::string& seeds, const std::string& depths) {
  RunConfig rc = RunConfig::from_file(config_path);

  std::vector<std::string> kinds = split_csv_list(blocks);
  if (kinds.empty()) kinds = pcblock::BlockKind::all_names();

  if (!seeds.empty()) {
    rc.train.seeds.clear();
    for (const std::string& s : split_csv_list(seeds)) {
      try {
        rc.train.seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw pctk::ConfigError("bad seed '" + s + "' in --seeds");
      }
    }
    if (rc.train.seeds.empty()) throw pctk::ConfigError("--seeds lists no seeds");
  }

  std::vector<int> depth_list;
  for (const std::string& d : split_csv_list(depths)) {
    try {
      depth_list.push_back(std::stoi(d));
    } catch (const std::exception&) {
      throw pctk::ConfigError("bad depth '" + d + "' in --depths");
    }
  }
  if (depth_list.empty()) depth_list = {1};

  if (rc.corpus.empty()) throw pctk::ConfigError("missing required config key 'corpus'");
  if (rc.out_dir.empty()) throw pctk::ConfigError("missing required config key 'out_dir'");
  const std::string corpus_text = pctk::read_text_file(rc.corpus);

  write_run_artifacts(rc.out_dir, rc, "truncation");
  const trainkit::TruncationResult result =
      trainkit::truncation_experiment(corpus_text, kinds, depth_list, rc.model, rc.train,
                                      rc.out_dir, textdata::parse_level(rc.vocab_level));

  std::printf("%-12s %-6s %-8s %-22s %-8s %s\n", "kind", "depth", "seed",
              "best_valid_ppl", "steps", "params");
  for (const trainkit::CellResult& c : result.cells) {
    if (c.failed)
      std::printf("%-12s %-6d %-8llu %-22s %-8lld %zu  [failed: %s]\n", c.kind.c_str(),
                  c.depth, static_cast<unsigned long long>(c.seed), "-", c.steps,
                  c.params, c.fail_reason.c_str());
    else
      std::printf("%-12s %-6d %-8llu %-22s %-8lld %zu\n", c.kind.c_str(), c.depth,
                  static_cast<unsigned long long>(c.seed),
                  fmt(c.best_valid_ppl).c_str(), c.steps, c.params);
  }
  std::printf("\n%-12s %-6s %-22s %s\n", "kind", "depth", "mean_ppl", "cells");
  for (const trainkit::MeanRow& m : result.means)
    std::printf("%-12s %-6d %-22s %d\n", m.kind.c_str(), m.depth,
                m.cells_ok > 0 ? fmt(m.mean_ppl).c_str() : "-", m.cells_ok);
  std::printf("wrote %s\n", result.comparison_path.c_str());

  for (const trainkit::CellResult& c : result.cells)
    if (c.failed) return 3;
  return 0;
}

std::optional<double> parse_opt_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::strtod(s.c_str(), nullptr);
}

int cmd_coeff_trace(const std::string& metrics_path, int order,
                    const std::string& out_path) {
  const std::string text = pctk::read_text_file(metrics_path);
  std::vector<std::string> lines = pctk::split(text, '\n');
  if (lines.empty() || lines[0] != trainkit::metrics_csv_header())
    throw pctk::DataError("not a metrics CSV (unexpected header): " + metrics_path);

  std::vector<trainkit::MetricsRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> f = pctk::split(lines[i], ',');
    if (f.size() != 10)
      throw pctk::DataError("bad metrics row on line " + std::to_string(i + 1));
    trainkit::MetricsRow row;
    try {
      row.step = std::stoll(f[0]);
    } catch (const std::exception&) {
      throw pctk::DataError("bad step on line " + std::to_string(i + 1));
    }
    row.train_loss = parse_opt_field(f[1]);
    row.valid_loss = f[2].empty() ? 0.0 : std::strtod(f[2].c_str(), nullptr);
    row.valid_ppl = f[3].empty() ? 0.0 : std::strtod(f[3].c_str(), nullptr);
    row.lr = parse_opt_field(f[4]);
    row.gamma = parse_opt_field(f[5]);
    if (!f[6].empty() || !f[7].empty() || !f[8].empty() || !f[9].empty()) {
      std::array<double, 4> w{};
      for (int k = 0; k < 4; ++k) {
        if (f[static_cast<std::size_t>(6 + k)].empty())
          throw pctk::DataError("partial corrector row on line " + std::to_string(i + 1));
        w[static_cast<std::size_t>(k)] =
            std::strtod(f[static_cast<std::size_t>(6 + k)].c_str(), nullptr);
      }
      row.corrector_w = w;
    }
    rows.push_back(row);
  }

  const std::string csv = trainkit::coeff_trace_csv(rows, order);
  if (out_path.empty())
    std::fputs(csv.c_str(), stdout);
  else
    pctk::write_text_file(out_path, csv);
  return 0;
}

}  // namespace

// ====================================================================
//  main
// ====================================================================

int main(int argc, char** argv) {
  CLI::App app{
      "pctk — predictor-corrector transformer toolkit\n"
      "Exit codes: 0 success, 2 usage/config error, 3 numerical failure."};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  // ode-validate
  auto* ode = app.add_subcommand(
      "ode-validate", "Estimate a solver's empirical convergence order");
  std::string ode_method;
  std::string ode_problem = "decay";
  double ode_h0 = 0.0;
  int ode_levels = 6;
  std::string ode_out;
  ode->add_option("--method", ode_method,
                  "euler | rk2 | rk4 | ab4 | am4 | abm4")->required();
  ode->add_option("--problem", ode_problem, "decay | oscillator (default decay)");
  ode->add_option("--h0", ode_h0,
                  "coarsest step; must divide the horizon (default horizon/32)");
  ode->add_option("--levels", ode_levels, "number of halvings (default 6)");
  ode->add_option("--out", ode_out, "write the per-level CSV here");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "Compare analytic gradients to central differences");
  std::string gc_block;
  int gc_width = 32, gc_seq = 8, gc_samples = 200;
  std::uint64_t gc_seed = 7;
  gc->add_option("--block", gc_block, "block kind (e.g. pc-rk4-ms)")->required();
  gc->add_option("--width", gc_width, "model width (default 32)");
  gc->add_option("--seq", gc_seq, "sequence length (default 8)");
  gc->add_option("--samples", gc_samples, "parameter scalars to probe (default 200)");
  gc->add_option("--seed", gc_seed, "rng seed (default 7)");

  // train
  auto* tr = app.add_subcommand("train", "Train one model from a JSON config");
  std::string tr_config;
  std::uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  tr->add_option("--config", tr_config, "JSON config path")->required();
  tr->add_option("--seed", tr_seed, "override the config seed")
      ->each([&tr_seed_set](const std::string&) { tr_seed_set = true; });

  // eval
  auto* ev = app.add_subcommand(
      "eval", "Evaluate a checkpoint on a corpus's validation split");
  std::string ev_ckpt, ev_corpus;
  ev->add_option("--ckpt", ev_ckpt, "model.pck path (config.json must sit next to it)")
      ->required();
  ev->add_option("--corpus", ev_corpus, "corpus text file")->required();

  // truncation
  auto* tc = app.add_subcommand(
      "truncation", "Train a (kind x depth x seed) grid under one budget");
  std::string tc_config, tc_blocks, tc_seeds, tc_depths = "1";
  tc->add_option("--config", tc_config, "JSON config path")->required();
  tc->add_option("--blocks", tc_blocks, "comma-separated kinds (default: all)");
  tc->add_option("--seeds", tc_seeds, "comma-separated seeds (default: config seeds)");
  tc->add_option("--depths", tc_depths, "comma-separated depths in {1,2} (default 1)");

  // coeff-trace
  auto* ct = app.add_subcommand(
      "coeff-trace", "Derive stage-weight trajectories from a metrics CSV");
  std::string ct_metrics, ct_out;
  int ct_order = 4;
  ct->add_option("--metrics", ct_metrics, "metrics.csv from a training run")->required();
  ct->add_option("--order", ct_order, "stage count n for the weight formula (default 4)");
  ct->add_option("--out", ct_out, "write the trace CSV here (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(ode))
      return cmd_ode_validate(ode_method, ode_problem, ode_h0, ode_levels, ode_out);
    if (app.got_subcommand(gc))
      return cmd_gradcheck(gc_block, gc_width, gc_seq, gc_samples, gc_seed);
    if (app.got_subcommand(tr))
      return cmd_train(tr_config, tr_seed_set ? std::optional<std::uint64_t>(tr_seed)
                                              : std::nullopt);
    if (app.got_subcommand(ev)) return cmd_eval(ev_ckpt, ev_corpus);
    if (app.got_subcommand(tc))
      return cmd_truncation(tc_config, tc_blocks, tc_seeds, tc_depths);
    if (app.got_subcommand(ct)) return cmd_coeff_trace(ct_metrics, ct_order, ct_out);
  } catch (const pctk::NumericsError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;  // unreachable with require_subcommand(1)
}
