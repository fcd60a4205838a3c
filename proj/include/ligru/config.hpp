// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Run configuration: flat key=value text with documented keys.
 *
 * Lines are "key = value"; '#' starts a comment. Unknown keys are rejected.
 *
 *   cell            relu-rnn | lstm | gru | m-gru | li-gru    (li-gru)
 *   layers          >= 1                                       (1)
 *   units           >= 1, units per direction                  (32)
 *   bidirectional   true | false                               (true)
 *   keep_prob       (0, 1], dropout keep probability           (1.0)
 *   batch_norm      true | false                               (true)
 *   lr              > 0                                        (0.001)
 *   lr_threshold    >= 0, dev improvement below it halves lr   (0.001)
 *   epochs          >= 0                                       (22)
 *   batch_size      >= 1                                       (8)
 *   seed            unsigned 64-bit                            (1)
 *   weight_noise    >= 0, stddev; 0 disables                   (0)
 *   head            framewise | ctc                            (framewise)
 *   classes         >= 0, labels excluding blank; 0 infers     (0)
 *   label_map       path to "<train-id> <eval-id>" lines       ()
 *   precision       double | float                             (double)
 *   recurrent_init  orthogonal | glorot                        (orthogonal)
 *   init_scale      > 0, multiplies initial W and U            (1.0)
 *   gamma_init      batch-norm gain at start                   (0.1)
 *   reshuffle       true | false, shuffle batch order          (false)
 *   train_data, train_targets, dev_data, dev_targets           paths
 *   out_dir         directory for log and checkpoints          (.)
 */
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cells.hpp"
#include "network.hpp"

namespace ligru {

class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string> &problems() const { return problems_; }

private:
  static std::string join(const std::vector<std::string> &p) {
    std::string s = "invalid configuration:";
    for (const auto &x : p)
      s += "\n  " + x;
    return s;
  }
  std::vector<std::string> problems_;
};

enum class Precision { f64, f32 };

struct RunConfig {
  CellKind cell = CellKind::ligru;
  std::size_t layers = 1;
  std::size_t units = 32;
  bool bidirectional = true;
  double keep_prob = 1.0;
  bool batch_norm = true;
  double lr = 1e-3;
  double lr_threshold = 0.001;
  std::size_t epochs = 22;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  double weight_noise = 0.0;
  HeadKind head = HeadKind::framewise;
  std::size_t classes = 0;
  std::string label_map;
  Precision precision = Precision::f64;
  RecurrentInit recurrent_init = RecurrentInit::orthogonal;
  double init_scale = 1.0;
  double gamma_init = 0.1;
  bool reshuffle = false;
  std::string train_data, train_targets, dev_data, dev_targets;
  std::string out_dir = ".";

  StackConfig stack() const {
    return {cell, layers, units, bidirectional, keep_prob, batch_norm};
  }
  InitOptions init_options() const {
    InitOptions o;
    o.recurrent = recurrent_init;
    o.weight_scale = init_scale;
    o.gamma = gamma_init;
    return o;
  }

  /// Applies one key=value pair; returns an error message or empty.
  std::string set(const std::string &key, const std::string &value) {
    try {
      if (key == "cell") cell = parse_cell_kind(value);
      else if (key == "layers") layers = to_count(value);
      else if (key == "units") units = to_count(value);
      else if (key == "bidirectional") bidirectional = to_bool(value);
      else if (key == "keep_prob") keep_prob = to_real(value);
      else if (key == "batch_norm") batch_norm = to_bool(value);
      else if (key == "lr") lr = to_real(value);
      else if (key == "lr_threshold") lr_threshold = to_real(value);
      else if (key == "epochs") epochs = to_count(value);
      else if (key == "batch_size") batch_size = to_count(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "weight_noise") weight_noise = to_real(value);
      else if (key == "head") {
        if (value == "framewise") head = HeadKind::framewise;
        else if (value == "ctc") head = HeadKind::ctc;
        else return "head: expected framewise or ctc, got '" + value + "'";
      }
      else if (key == "classes") classes = to_count(value);
      else if (key == "label_map") label_map = value;
      else if (key == "precision") {
        if (value == "double") precision = Precision::f64;
        else if (value == "float") precision = Precision::f32;
        else return "precision: expected double or float, got '" + value + "'";
      }
      else if (key == "recurrent_init") {
        if (value == "orthogonal") recurrent_init = RecurrentInit::orthogonal;
        else if (value == "glorot") recurrent_init = RecurrentInit::glorot;
        else return "recurrent_init: expected orthogonal or glorot, got '" + value + "'";
      }
      else if (key == "init_scale") init_scale = to_real(value);
      else if (key == "gamma_init") gamma_init = to_real(value);
      else if (key == "reshuffle") reshuffle = to_bool(value);
      else if (key == "train_data") train_data = value;
      else if (key == "train_targets") train_targets = value;
      else if (key == "dev_data") dev_data = value;
      else if (key == "dev_targets") dev_targets = value;
      else if (key == "out_dir") out_dir = value;
      else return "unknown key '" + key + "'";
    } catch (const std::exception &e) {
      return key + ": cannot parse '" + value + "' (" + e.what() + ")";
    }
    return {};
  }

  /// Every out-of-range value, one message each.
  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (layers < 1) p.push_back("layers must be >= 1");
    if (units < 1) p.push_back("units must be >= 1");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) p.push_back("keep_prob must lie in (0, 1]");
    if (!(lr > 0.0)) p.push_back("lr must be > 0");
    if (!(lr_threshold >= 0.0)) p.push_back("lr_threshold must be >= 0");
    if (batch_size < 1) p.push_back("batch_size must be >= 1");
    if (!(weight_noise >= 0.0)) p.push_back("weight_noise must be >= 0");
    if (!(init_scale > 0.0)) p.push_back("init_scale must be > 0");
    if (!(gamma_init == gamma_init)) p.push_back("gamma_init must be a number");
    return p;
  }

  void validate() const {
    auto p = problems();
    if (!p.empty())
      throw ConfigError(std::move(p));
  }

  static RunConfig parse(std::istream &in, const std::string &origin = "config") {
    RunConfig c;
    std::vector<std::string> errors;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos)
        line.erase(hash);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (key.empty() && eq == std::string::npos)
        continue;
      if (eq == std::string::npos) {
        errors.push_back(origin + ":" + std::to_string(lineno) + ": expected key = value");
        continue;
      }
      if (auto e = c.set(key, trim(line.substr(eq + 1))); !e.empty())
        errors.push_back(origin + ":" + std::to_string(lineno) + ": " + e);
    }
    if (!errors.empty())
      throw ConfigError(std::move(errors));
    return c;
  }

  static RunConfig read(const std::string &path) {
    std::ifstream in(path);
    if (!in)
      throw ConfigError({"cannot open config file " + path});
    return parse(in, path);
  }

  /// Canonical text form, parseable by parse().
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "cell = " << to_string(cell) << '\n'
       << "layers = " << layers << '\n'
       << "units = " << units << '\n'
       << "bidirectional = " << (bidirectional ? "true" : "false") << '\n'
       << "keep_prob = " << keep_prob << '\n'
       << "batch_norm = " << (batch_norm ? "true" : "false") << '\n'
       << "lr = " << lr << '\n'
       << "lr_threshold = " << lr_threshold << '\n'
       << "epochs = " << epochs << '\n'
       << "batch_size = " << batch_size << '\n'
       << "seed = " << seed << '\n'
       << "weight_noise = " << weight_noise << '\n'
       << "head = " << (head == HeadKind::ctc ? "ctc" : "framewise") << '\n'
       << "classes = " << classes << '\n'
       << "label_map = " << label_map << '\n'
       << "precision = " << (precision == Precision::f32 ? "float" : "double") << '\n'
       << "recurrent_init = "
       << (recurrent_init == RecurrentInit::glorot ? "glorot" : "orthogonal") << '\n'
       << "init_scale = " << init_scale << '\n'
       << "gamma_init = " << gamma_init << '\n'
       << "reshuffle = " << (reshuffle ? "true" : "false") << '\n'
       << "train_data = " << train_data << '\n'
       << "train_targets = " << train_targets << '\n'
       << "dev_data = " << dev_data << '\n'
       << "dev_targets = " << dev_targets << '\n'
       << "out_dir = " << out_dir << '\n';
    return os.str();
  }

private:
  static std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
      return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static bool to_bool(const std::string &v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("expected true or false");
  }
  static std::size_t to_count(const std::string &v) {
    if (!v.empty() && v[0] == '-')
      throw std::invalid_argument("negative count");
    std::size_t used = 0;
    const auto r = std::stoull(v, &used);
    if (used != v.size())
      throw std::invalid_argument("trailing characters");
    return static_cast<std::size_t>(r);
  }
  static double to_real(const std::string &v) {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size())
      throw std::invalid_argument("trailing characters");
    return r;
  }
};

} // namespace ligru
