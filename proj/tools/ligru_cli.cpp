// SPDX-License-Identifier: Apache-2.0
//
// ligru: command-line front end.
//
//   ligru gen-synth     --task framewise-pattern --out-dir data --seed 1
//   ligru train         --config run.cfg [--set key=value ...]
//   ligru eval          --checkpoint out/best.ckpt --data dev.lgru --targets dev.tgt
//   ligru decode        --checkpoint out/best.ckpt --data dev.lgru
//   ligru analyze-gates --checkpoint gru/best.ckpt --data dev.lgru --series czr.txt
//   ligru grad-norms    --config run.cfg --epochs 5
//   ligru grad-check    [--instances 10]
//   ligru param-count   --layers 5 --units 465 --input-dim 39
//
// Exit status: 0 success, 1 usage, 2 invalid configuration or input,
// 3 runtime compute error, 4 gradient-check tolerance failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ligru/ligru.hpp"

using namespace ligru;
using nlohmann::json;

namespace {

enum Exit { ok = 0, usage = 1, invalid = 2, runtime = 3, check_failed = 4 };

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string summary;
};

void add_common(CLI::App *sub, CommonOptions &o, bool with_config = true) {
  if (with_config) {
    sub->add_option("--config", o.config, "key = value configuration file");
    sub->add_option("--set", o.overrides, "override a configuration key (key=value)");
  }
  sub->add_option("--seed", o.seed, "seed for every random stream");
  sub->add_option("--summary", o.summary, "write a JSON result summary to this path");
}

RunConfig load_config(const CommonOptions &o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::read(o.config);
  std::vector<std::string> errors;
  for (const auto &kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      errors.push_back("--set " + kv + ": expected key=value");
      continue;
    }
    if (auto e = cfg.set(kv.substr(0, eq), kv.substr(eq + 1)); !e.empty())
      errors.push_back("--set: " + e);
  }
  if (o.seed)
    cfg.seed = *o.seed;
  if (!errors.empty())
    throw ConfigError(errors);
  cfg.validate();
  return cfg;
}

void write_summary(const std::string &path, const json &j) {
  if (path.empty())
    return;
  std::ofstream out(path);
  if (!out)
    throw ArchiveError(ArchiveErrorKind::io, "cannot write summary " + path);
  out << j.dump(2) << '\n';
}

template <class T>
Dataset<T> load_dataset(const std::string &data, const std::string &targets) {
  const FeatureArchive a = read_feature_archive(data);
  if (!targets.empty())
    return Dataset<T>::assemble(a, read_targets(targets));
  // Features only: placeholder framewise targets of the right length.
  TargetFile tf;
  for (const auto &s : a.sequences)
    tf.add(s.id, Target{false, std::vector<int>(s.frames.rows(), 0)});
  return Dataset<T>::assemble(a, tf);
}

json eval_json(const EvalResult &r) {
  return {{"loss", r.loss},
          {"loss_sum", r.loss_sum},
          {"loss_per_frame", r.frames ? r.loss_sum / static_cast<double>(r.frames) : 0.0},
          {"metric", r.metric},
          {"errors", r.errors},
          {"reference", r.reference},
          {"frames", r.frames}};
}

std::string checkpoint_bytes(const std::string &path) { return detail::read_file(path); }

bool is_double(const RunConfig &c) { return c.precision == Precision::f64; }

// --- train -----------------------------------------------------------------

struct TrainOptions {
  CommonOptions common;
  std::string resume;
};

template <class T> int run_train(const RunConfig &cfg, const TrainOptions &o) {
  if (cfg.train_data.empty() || cfg.train_targets.empty())
    throw ConfigError({"train_data and train_targets are required"});
  const Dataset<T> train = load_dataset<T>(cfg.train_data, cfg.train_targets);
  const Dataset<T> dev = cfg.dev_data.empty()
                             ? Dataset<T>{}
                             : load_dataset<T>(cfg.dev_data, cfg.dev_targets);
  if (cfg.head == HeadKind::ctc && !train.is_ctc())
    throw ConfigError({"head = ctc needs CTC targets (\"<id> | l1 l2 ...\")"});
  if (cfg.head == HeadKind::framewise && train.is_ctc())
    throw ConfigError({"head = framewise needs per-frame targets"});

  Trainer<T> tr = o.resume.empty() ? Trainer<T>(cfg, train.dim, output_dim_for(cfg, train))
                                   : load_checkpoint<T>(o.resume);
  tr.out_dir = cfg.out_dir;
  const std::size_t remaining = cfg.epochs > tr.epoch ? cfg.epochs - tr.epoch : 0;
  for (std::size_t e = 0; e < remaining; ++e) {
    tr.train_epochs(train, dev, 1);
    std::cout << format_log_line(tr.history.back()) << std::endl;
  }
  json hist = json::array();
  for (const auto &r : tr.history)
    hist.push_back({{"epoch", r.epoch},
                    {"train_loss", r.train_loss},
                    {"dev_metric", r.dev_metric},
                    {"dev_loss", r.dev_loss},
                    {"lr", r.lr}});
  write_summary(o.common.summary,
                {{"command", "train"},
                 {"epochs", tr.epoch},
                 {"best_dev_metric", tr.best_metric},
                 {"final_lr", tr.adam.lr},
                 {"lr_halvings", tr.schedule.halvings},
                 {"out_dir", cfg.out_dir},
                 {"history", hist}});
  return ok;
}

// --- eval / decode ---------------------------------------------------------

struct EvalOptions {
  CommonOptions common;
  std::string checkpoint, data, targets, label_map, output;
};

template <class T> int run_eval(const EvalOptions &o) {
  Trainer<T> tr = load_checkpoint<T>(o.checkpoint);
  if (!o.label_map.empty())
    tr.label_map = LabelMap::read(o.label_map);
  if (o.targets.empty())
    throw ConfigError({"eval needs --targets"});
  const Dataset<T> data = load_dataset<T>(o.data, o.targets);
  const EvalResult r = tr.evaluate(data);
  std::cout << (tr.net.head == HeadKind::ctc ? "label error rate " : "frame error rate ")
            << r.metric << " (" << r.errors << "/" << r.reference << "), loss " << r.loss
            << '\n';
  json j = eval_json(r);
  j["command"] = "eval";
  j["checkpoint"] = o.checkpoint;
  write_summary(o.common.summary, j);
  return ok;
}

template <class T> int run_decode(const EvalOptions &o) {
  Trainer<T> tr = load_checkpoint<T>(o.checkpoint);
  if (!o.label_map.empty())
    tr.label_map = LabelMap::read(o.label_map);
  const Dataset<T> data = load_dataset<T>(o.data, "");
  std::ofstream file;
  if (!o.output.empty()) {
    file.open(o.output);
    if (!file)
      throw ArchiveError(ArchiveErrorKind::io, "cannot write " + o.output);
  }
  std::ostream &out = o.output.empty() ? std::cout : file;
  const BatchPlan plan = build_batch_plan(data.lengths(), tr.config.batch_size);
  std::vector<std::string> lines(data.size());
  for (const auto &idx : plan.batches) {
    const Minibatch<T> mb = make_minibatch(data, idx);
    const NetworkTrace<T> trace = network_forward(tr.net, mb.x, Mode::eval);
    for (std::size_t b = 0; b < mb.x.batch; ++b) {
      const Matrix<T> lp = log_softmax(mb.x.unpack(trace.logits, b));
      LabelSeq hyp;
      std::string line = data.ids[idx[b]];
      if (tr.net.head == HeadKind::ctc) {
        hyp = best_path_decode(lp);
        if (tr.label_map)
          hyp = map_labels(hyp, *tr.label_map);
        line += " |";
      } else {
        for (std::size_t t = 0; t < lp.rows(); ++t) {
          const auto row = lp.row(t);
          hyp.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) -
                                         row.begin()));
        }
      }
      for (int l : hyp)
        line += ' ' + std::to_string(l);
      lines[idx[b]] = std::move(line);
    }
  }
  for (const auto &l : lines)
    out << l << '\n';
  write_summary(o.common.summary, {{"command", "decode"},
                                   {"utterances", data.size()},
                                   {"output", o.output.empty() ? "-" : o.output}});
  return ok;
}

// --- analyze-gates ---------------------------------------------------------

struct GateOptions {
  CommonOptions common;
  std::string checkpoint, data, series, report;
  std::size_t max_lag = 0;
  std::size_t layer = 0;
  bool mean_removed = false;
};

template <class T> int run_gates(const GateOptions &o) {
  Trainer<T> tr = load_checkpoint<T>(o.checkpoint);
  const Dataset<T> data = load_dataset<T>(o.data, "");
  const auto traces = collect_gate_traces(tr.net, data, o.layer, tr.config.batch_size);
  const CorrelationReport rep = correlation_report(traces, o.max_lag, o.mean_removed);
  std::cout << "utterances\t" << rep.utterances << "\nnormalized_peak\t"
            << rep.normalized_peak << "\npeak_lag\t" << rep.peak_lag << "\npeak_bound\t"
            << rep.peak_bound << "\nczz_peaks_at_zero\t"
            << (rep.czz_peaks_at_zero ? "true" : "false") << '\n';
  if (!o.series.empty()) {
    std::ofstream s(o.series);
    if (!s)
      throw ArchiveError(ArchiveErrorKind::io, "cannot write " + o.series);
    rep.write_series(s);
  }
  if (!o.report.empty()) {
    std::ofstream s(o.report);
    if (!s)
      throw ArchiveError(ArchiveErrorKind::io, "cannot write " + o.report);
    s << "lag\tczr\tczz\n";
    for (std::size_t i = 0; i < rep.lags.size(); ++i)
      s << rep.lags[i] << '\t' << rep.czr[i] << '\t' << rep.czz[i] << '\n';
  }
  write_summary(o.common.summary, {{"command", "analyze-gates"},
                                   {"utterances", rep.utterances},
                                   {"normalized_peak", rep.normalized_peak},
                                   {"peak_lag", rep.peak_lag},
                                   {"peak_bound", rep.peak_bound},
                                   {"czz_peaks_at_zero", rep.czz_peaks_at_zero},
                                   {"mean_removed", o.mean_removed}});
  return ok;
}

// --- grad-norms ------------------------------------------------------------

struct NormOptions {
  CommonOptions common;
  std::size_t epochs = 5;
  std::string report;
};

template <class T> int run_norms(const RunConfig &cfg, const NormOptions &o) {
  if (cfg.train_data.empty() || cfg.train_targets.empty())
    throw ConfigError({"train_data and train_targets are required"});
  const Dataset<T> train = load_dataset<T>(cfg.train_data, cfg.train_targets);
  const Dataset<T> dev = cfg.dev_data.empty()
                             ? Dataset<T>{}
                             : load_dataset<T>(cfg.dev_data, cfg.dev_targets);
  const GradNormAccumulator acc = gradient_norms(cfg, train, dev, o.epochs);
  std::ofstream file;
  if (!o.report.empty()) {
    file.open(o.report);
    if (!file)
      throw ArchiveError(ArchiveErrorKind::io, "cannot write " + o.report);
  }
  std::ostream &out = o.report.empty() ? std::cout : file;
  out << "parameter\tmean_l2_norm\n";
  json norms = json::object();
  for (const auto &[name, v] : acc.table()) {
    out << name << '\t' << v << '\n';
    norms[name] = v;
  }
  write_summary(o.common.summary, {{"command", "grad-norms"},
                                   {"cell", std::string(to_string(cfg.cell))},
                                   {"epochs", o.epochs},
                                   {"batches", acc.batches()},
                                   {"norms", norms}});
  return ok;
}

// --- grad-check ------------------------------------------------------------

struct CheckOptions {
  CommonOptions common;
  std::size_t instances = 10;
  bool verbose = false;
};

int run_check(const CheckOptions &o) {
  const GradCheckSuite s = full_gradcheck_suite(o.common.seed.value_or(1), o.instances);
  json failures = json::array();
  for (const auto &r : s.reports) {
    const bool pass = r.passed(s.tolerance);
    if (o.verbose || !pass) {
      const TensorCheck *w = r.worst();
      std::cout << (pass ? "ok   " : "FAIL ") << r.label << "  max rel err "
                << r.max_rel() << " (" << w->name << ")\n";
    }
    if (!pass)
      failures.push_back({{"label", r.label}, {"max_rel", r.max_rel()}});
  }
  std::cout << s.reports.size() << " checks, max relative error " << s.max_rel()
            << ", tolerance " << s.tolerance << ", " << s.seconds << " s: "
            << (s.passed() ? "passed" : "FAILED") << '\n';
  write_summary(o.common.summary, {{"command", "grad-check"},
                                   {"checks", s.reports.size()},
                                   {"max_rel", s.max_rel()},
                                   {"tolerance", s.tolerance},
                                   {"seconds", s.seconds},
                                   {"passed", s.passed()},
                                   {"failures", failures}});
  return s.passed() ? ok : check_failed;
}

// --- param-count -----------------------------------------------------------

struct CountOptions {
  CommonOptions common;
  std::optional<std::string> cell;
  std::optional<std::size_t> layers, units;
  std::optional<bool> bidirectional, batch_norm;
  std::size_t input_dim = 39;
  std::size_t output_dim = 0;
};

int run_count(const CountOptions &o) {
  RunConfig cfg = load_config(o.common);
  if (o.cell)
    cfg.cell = parse_cell_kind(*o.cell);
  if (o.layers)
    cfg.layers = *o.layers;
  if (o.units)
    cfg.units = *o.units;
  if (o.bidirectional)
    cfg.bidirectional = *o.bidirectional;
  if (o.batch_norm)
    cfg.batch_norm = *o.batch_norm;
  cfg.validate();
  StackConfig stack = cfg.stack();
  const ParamCount pc = param_count(stack, o.input_dim, o.output_dim);
  std::cout << "group\tweights\tbiases\tnorm\ttotal\n";
  json groups = json::array();
  for (const auto &g : pc.groups) {
    std::cout << g.name << '\t' << g.weights << '\t' << g.biases << '\t' << g.norm << '\t'
              << g.total() << '\n';
    groups.push_back({{"name", g.name},
                      {"weights", g.weights},
                      {"biases", g.biases},
                      {"norm", g.norm},
                      {"total", g.total()}});
  }
  std::cout << "total\t" << pc.total << '\n';
  stack.kind = CellKind::gru;
  const std::size_t gru = param_count(stack, o.input_dim, o.output_dim).total;
  stack.kind = CellKind::ligru;
  const std::size_t li = param_count(stack, o.input_dim, o.output_dim).total;
  const double ratio = static_cast<double>(li) / static_cast<double>(gru);
  std::cout << "gru_total\t" << gru << "\nligru_total\t" << li << "\nligru_over_gru\t"
            << ratio << '\n';
  write_summary(o.common.summary, {{"command", "param-count"},
                                   {"cell", std::string(to_string(cfg.cell))},
                                   {"total", pc.total},
                                   {"groups", groups},
                                   {"gru_total", gru},
                                   {"ligru_total", li},
                                   {"ligru_over_gru", ratio}});
  return ok;
}

// --- gen-synth -------------------------------------------------------------

struct SynthOptions {
  CommonOptions common;
  std::string task = "framewise-pattern";
  std::string out_dir = ".";
  SynthParams params;
};

int run_synth(const SynthOptions &o) {
  const std::uint64_t seed = o.common.seed.value_or(1);
  const SynthCorpus c = gen_synthetic(parse_synth_task(o.task), o.params, seed);
  std::filesystem::create_directories(o.out_dir);
  const std::filesystem::path dir(o.out_dir);
  write_feature_archive((dir / "train.lgru").string(), c.train.features);
  write_targets((dir / "train.tgt").string(), c.train.targets);
  write_feature_archive((dir / "dev.lgru").string(), c.dev.features);
  write_targets((dir / "dev.tgt").string(), c.dev.targets);
  std::cout << "wrote " << o.params.train << " train and " << o.params.dev
            << " dev utterances to " << o.out_dir << '\n';
  write_summary(o.common.summary, {{"command", "gen-synth"},
                                   {"task", o.task},
                                   {"seed", seed},
                                   {"train", (dir / "train.lgru").string()},
                                   {"dev", (dir / "dev.lgru").string()},
                                   {"classes", o.params.classes},
                                   {"dim", o.params.dim}});
  return ok;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Light GRU toolkit: recurrent acoustic-model training and diagnostics"};
  app.require_subcommand(1);

  TrainOptions train;
  auto *c_train = app.add_subcommand("train", "train a model from a configuration");
  add_common(c_train, train.common);
  c_train->add_option("--resume", train.resume, "continue from a checkpoint");

  EvalOptions eval, decode;
  auto *c_eval = app.add_subcommand("eval", "score a checkpoint on labelled data");
  add_common(c_eval, eval.common, false);
  c_eval->add_option("--checkpoint", eval.checkpoint)->required();
  c_eval->add_option("--data", eval.data, "feature archive")->required();
  c_eval->add_option("--targets", eval.targets, "target file")->required();
  c_eval->add_option("--label-map", eval.label_map, "train-to-eval label map");

  auto *c_decode = app.add_subcommand("decode", "write best-path hypotheses");
  add_common(c_decode, decode.common, false);
  c_decode->add_option("--checkpoint", decode.checkpoint)->required();
  c_decode->add_option("--data", decode.data, "feature archive")->required();
  c_decode->add_option("--label-map", decode.label_map, "train-to-eval label map");
  c_decode->add_option("--output", decode.output, "hypothesis file (default stdout)");

  GateOptions gates;
  auto *c_gates = app.add_subcommand("analyze-gates", "update/reset gate cross-correlation");
  add_common(c_gates, gates.common, false);
  c_gates->add_option("--checkpoint", gates.checkpoint)->required();
  c_gates->add_option("--data", gates.data, "feature archive")->required();
  c_gates->add_option("--max-lag", gates.max_lag, "largest lag (0: min(T-1, 200))");
  c_gates->add_option("--layer", gates.layer, "layer to analyse");
  c_gates->add_flag("--mean-removed", gates.mean_removed, "subtract series means first");
  c_gates->add_option("--series", gates.series, "plot series: lag, C(z,r), C(z,z) normalized");
  c_gates->add_option("--report", gates.report, "raw tab-separated correlation table");

  NormOptions norms;
  auto *c_norms = app.add_subcommand("grad-norms", "average gradient L2 norms while training");
  add_common(c_norms, norms.common);
  c_norms->add_option("--epochs", norms.epochs, "training epochs to average over");
  c_norms->add_option("--report", norms.report, "tab-separated table (default stdout)");

  CheckOptions check;
  auto *c_check = app.add_subcommand("grad-check", "finite-difference gradient suite");
  add_common(c_check, check.common, false);
  c_check->add_option("--instances", check.instances, "random instances per cell kind");
  c_check->add_flag("--verbose", check.verbose, "print every check");

  CountOptions count;
  auto *c_count = app.add_subcommand("param-count", "trainable parameter breakdown");
  add_common(c_count, count.common);
  c_count->add_option("--cell", count.cell);
  c_count->add_option("--layers", count.layers);
  c_count->add_option("--units", count.units);
  c_count->add_option("--bidirectional", count.bidirectional);
  c_count->add_option("--batch-norm", count.batch_norm);
  c_count->add_option("--input-dim", count.input_dim, "feature dimension");
  c_count->add_option("--output-dim", count.output_dim, "output classes (0: no head)");

  SynthOptions synth;
  auto *c_synth = app.add_subcommand("gen-synth", "write a synthetic corpus");
  add_common(c_synth, synth.common, false);
  c_synth->add_option("--task", synth.task, "framewise-pattern | delayed-echo | ctc-spelling");
  c_synth->add_option("--out-dir", synth.out_dir);
  c_synth->add_option("--train", synth.params.train, "training utterances");
  c_synth->add_option("--dev", synth.params.dev, "development utterances");
  c_synth->add_option("--classes", synth.params.classes);
  c_synth->add_option("--dim", synth.params.dim);
  c_synth->add_option("--noise", synth.params.noise, "additive noise stddev");
  c_synth->add_option("--min-len", synth.params.min_len);
  c_synth->add_option("--max-len", synth.params.max_len);
  c_synth->add_option("--delay", synth.params.delay, "delayed-echo lag");
  c_synth->add_option("--min-segment", synth.params.min_segment);
  c_synth->add_option("--max-segment", synth.params.max_segment);
  c_synth->add_option("--min-labels", synth.params.min_labels);
  c_synth->add_option("--max-labels", synth.params.max_labels);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*c_train) {
      const RunConfig cfg = load_config(train.common);
      return is_double(cfg) ? run_train<double>(cfg, train) : run_train<float>(cfg, train);
    }
    if (*c_eval) {
      const bool dbl = is_double(checkpoint_config(checkpoint_bytes(eval.checkpoint)));
      return dbl ? run_eval<double>(eval) : run_eval<float>(eval);
    }
    if (*c_decode) {
      const bool dbl = is_double(checkpoint_config(checkpoint_bytes(decode.checkpoint)));
      return dbl ? run_decode<double>(decode) : run_decode<float>(decode);
    }
    if (*c_gates) {
      const bool dbl = is_double(checkpoint_config(checkpoint_bytes(gates.checkpoint)));
      return dbl ? run_gates<double>(gates) : run_gates<float>(gates);
    }
    if (*c_norms) {
      const RunConfig cfg = load_config(norms.common);
      return is_double(cfg) ? run_norms<double>(cfg, norms) : run_norms<float>(cfg, norms);
    }
    if (*c_check)
      return run_check(check);
    if (*c_count)
      return run_count(count);
    if (*c_synth)
      return run_synth(synth);
  } catch (const ConfigError &e) {
    std::cerr << e.what() << '\n';
    return invalid;
  } catch (const ContractViolation &e) {
    std::cerr << "error: " << e.what() << '\n';
    return invalid;
  } catch (const ArchiveError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return invalid;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return runtime;
  }
  return usage;
}
