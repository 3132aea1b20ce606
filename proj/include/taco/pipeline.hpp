/*
 * Copyright (c) 2026 The TACO Toolkit Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef TACO_PIPELINE_HPP
#define TACO_PIPELINE_HPP

#include "taco/calib.hpp"
#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/parallel.hpp"
#include "taco/refnet.hpp"
#include "taco/solvers.hpp"
#include "taco/synth.hpp"
#include "taco/tensor_store.hpp"

#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace taco
{

enum class TuneKind
{
  None,
  Probe,
  Taco,
  Qat
};

inline std::string to_string(TuneKind t)
{
  switch (t)
  {
    case TuneKind::None: return "none";
    case TuneKind::Probe: return "probe";
    case TuneKind::Taco: return "taco";
    case TuneKind::Qat: return "qat";
  }
  return "none";
}

inline TuneKind tune_from_string(const std::string &s)
{
  if (s == "none")
    return TuneKind::None;
  if (s == "probe")
    return TuneKind::Probe;
  if (s == "taco")
    return TuneKind::Taco;
  if (s == "qat")
    return TuneKind::Qat;
  throw ConfigError("unknown tuning mode '" + s + "' (expected none|probe|taco|qat)");
}

enum class ReportFormat
{
  Csv,
  Json,
  Both
};

inline ReportFormat report_format_from_string(const std::string &s)
{
  if (s == "csv")
    return ReportFormat::Csv;
  if (s == "json")
    return ReportFormat::Json;
  if (s == "both")
    return ReportFormat::Both;
  throw ConfigError("unknown report format '" + s + "' (expected csv|json|both)");
}

/// "unstructured" or "block:N".
inline std::size_t block_from_pattern(const std::string &s)
{
  if (s == "unstructured")
    return 1;
  if (s.rfind("block:", 0) == 0)
  {
    std::size_t n = 0;
    const std::string num = s.substr(6);
    auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), n);
    if (ec == std::errc() && ptr == num.data() + num.size() && n > 0)
      return n;
  }
  throw ConfigError("unknown sparsity pattern '" + s + "' (expected unstructured|block:N)");
}

struct TacoJob
{
  std::filesystem::path model_path;
  std::filesystem::path data_path;
  TaskSpec task;
  CompressionConfig config;
  TuneKind tuning = TuneKind::None;
  std::size_t calib_per_class = 5;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  ReportFormat report = ReportFormat::Both;
  /// Re-capture each layer's inputs from the partially compressed model.
  bool recapture = false;
  /// The classifier head is left dense unless set.
  bool prune_head = false;
  std::size_t workers = 1;
  /// Overrides the tuning stage's default optimizer settings.
  std::optional<TrainOpts> tune_opts;

  void validate() const
  {
    config.validate();
    if (calib_per_class == 0)
      throw ConfigError("job: calibration samples per class must be positive");
    if (tuning == TuneKind::Qat && !config.bits)
      throw ConfigError("job: qat tuning requires quantization bits");
    if (task.class_ids.empty())
      throw ConfigError("job: task has no classes");
  }
};

// ---------------------------------------------------------------------------
// Report rows

struct ReportRow
{
  std::string cell;
  std::string mode;
  std::string task;
  std::size_t class_count = 0;
  std::string solver;
  double sparsity = 0.0;
  std::string tuning;
  std::uint64_t seed = 0;
  double subtask_accuracy = 0.0;
  double full_task_accuracy = 0.0;
  double dense_subtask_accuracy = 0.0;
  std::size_t nonzero_params = 0;
  std::size_t dense_params = 0;
  double compression_rate = 0.0;
  std::string layer_errors;
  std::string calibration;
  std::string status = "ok";

  bool ok() const { return status == "ok"; }

  friend bool operator==(const ReportRow &, const ReportRow &) = default;
};

inline const std::vector<std::string> &report_columns()
{
  static const std::vector<std::string> cols{"cell",
                                             "mode",
                                             "task",
                                             "class_count",
                                             "solver",
                                             "sparsity",
                                             "tuning",
                                             "seed",
                                             "subtask_accuracy",
                                             "full_task_accuracy",
                                             "dense_subtask_accuracy",
                                             "nonzero_params",
                                             "dense_params",
                                             "compression_rate",
                                             "layer_errors",
                                             "calibration",
                                             "status"};
  return cols;
}

namespace detail
{

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v)
{
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec)
  {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v)
      return buf;
  }
  return buf;
}

inline std::vector<std::string> row_fields(const ReportRow &r)
{
  return {r.cell,
          r.mode,
          r.task,
          std::to_string(r.class_count),
          r.solver,
          format_double(r.sparsity),
          r.tuning,
          std::to_string(r.seed),
          format_double(r.subtask_accuracy),
          format_double(r.full_task_accuracy),
          format_double(r.dense_subtask_accuracy),
          std::to_string(r.nonzero_params),
          std::to_string(r.dense_params),
          format_double(r.compression_rate),
          r.layer_errors,
          r.calibration,
          r.status};
}

inline double parse_double(const std::string &s)
{
  char *end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw FormatError("report: malformed number '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string &s)
{
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw FormatError("report: malformed integer '" + s + "'");
  return v;
}

inline ReportRow row_from_fields(const std::vector<std::string> &f)
{
  if (f.size() != report_columns().size())
    throw FormatError("report: expected " + std::to_string(report_columns().size()) + " fields, got " +
                      std::to_string(f.size()));
  ReportRow r;
  r.cell = f[0];
  r.mode = f[1];
  r.task = f[2];
  r.class_count = parse_uint(f[3]);
  r.solver = f[4];
  r.sparsity = parse_double(f[5]);
  r.tuning = f[6];
  r.seed = parse_uint(f[7]);
  r.subtask_accuracy = parse_double(f[8]);
  r.full_task_accuracy = parse_double(f[9]);
  r.dense_subtask_accuracy = parse_double(f[10]);
  r.nonzero_params = parse_uint(f[11]);
  r.dense_params = parse_uint(f[12]);
  r.compression_rate = parse_double(f[13]);
  r.layer_errors = f[14];
  r.calibration = f[15];
  r.status = f[16];
  return r;
}

inline std::string csv_escape(const std::string &s)
{
  if (s.find_first_of(",\"\n\r") == std::string::npos)
    return s;
  std::string out = "\"";
  for (char c : s)
  {
    if (c == '"')
      out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_line(const std::vector<std::string> &fields)
{
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i)
    line += (i ? "," : "") + csv_escape(fields[i]);
  return line + "\n";
}

/// RFC 4180-style records.
inline std::vector<std::vector<std::string>> parse_csv(const std::string &text)
{
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i)
  {
    const char c = text[i];
    if (quoted)
    {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"')
      {
        field += '"';
        ++i;
      }
      else if (c == '"')
        quoted = false;
      else
        field += c;
      continue;
    }
    if (c == '"')
    {
      quoted = true;
      any = true;
    }
    else if (c == ',')
    {
      rec.push_back(std::move(field));
      field.clear();
      any = true;
    }
    else if (c == '\n' || c == '\r')
    {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n')
        ++i;
      if (any || !field.empty())
      {
        rec.push_back(std::move(field));
        records.push_back(std::move(rec));
      }
      rec.clear();
      field.clear();
      any = false;
    }
    else
    {
      field += c;
      any = true;
    }
  }
  if (quoted)
    throw FormatError("report: unterminated quoted CSV field");
  if (any || !field.empty())
  {
    rec.push_back(std::move(field));
    records.push_back(std::move(rec));
  }
  return records;
}

} // namespace detail

inline std::string report_csv(const std::vector<ReportRow> &rows)
{
  std::string out = detail::csv_line(report_columns());
  for (const auto &r : rows)
    out += detail::csv_line(detail::row_fields(r));
  return out;
}

inline std::vector<ReportRow> parse_report_csv(const std::string &text)
{
  const auto recs = detail::parse_csv(text);
  if (recs.empty() || recs.front() != report_columns())
    throw FormatError("report: CSV header does not match the report columns");
  std::vector<ReportRow> rows;
  for (std::size_t i = 1; i < recs.size(); ++i)
    rows.push_back(detail::row_from_fields(recs[i]));
  return rows;
}

inline std::string report_json(const std::vector<ReportRow> &rows)
{
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto &r : rows)
  {
    nlohmann::ordered_json o;
    o["cell"] = r.cell;
    o["mode"] = r.mode;
    o["task"] = r.task;
    o["class_count"] = r.class_count;
    o["solver"] = r.solver;
    o["sparsity"] = r.sparsity;
    o["tuning"] = r.tuning;
    o["seed"] = r.seed;
    o["subtask_accuracy"] = r.subtask_accuracy;
    o["full_task_accuracy"] = r.full_task_accuracy;
    o["dense_subtask_accuracy"] = r.dense_subtask_accuracy;
    o["nonzero_params"] = r.nonzero_params;
    o["dense_params"] = r.dense_params;
    o["compression_rate"] = r.compression_rate;
    o["layer_errors"] = r.layer_errors;
    o["calibration"] = r.calibration;
    o["status"] = r.status;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

inline std::vector<ReportRow> parse_report_json(const std::string &text)
{
  std::vector<ReportRow> rows;
  try
  {
    for (const auto &o : nlohmann::json::parse(text))
    {
      ReportRow r;
      r.cell = o.at("cell");
      r.mode = o.at("mode");
      r.task = o.at("task");
      r.class_count = o.at("class_count");
      r.solver = o.at("solver");
      r.sparsity = o.at("sparsity");
      r.tuning = o.at("tuning");
      r.seed = o.at("seed");
      r.subtask_accuracy = o.at("subtask_accuracy");
      r.full_task_accuracy = o.at("full_task_accuracy");
      r.dense_subtask_accuracy = o.at("dense_subtask_accuracy");
      r.nonzero_params = o.at("nonzero_params");
      r.dense_params = o.at("dense_params");
      r.compression_rate = o.at("compression_rate");
      r.layer_errors = o.at("layer_errors");
      r.calibration = o.at("calibration");
      r.status = o.at("status");
      rows.push_back(std::move(r));
    }
  }
  catch (const nlohmann::json::exception &e)
  {
    throw FormatError(std::string("report: malformed JSON: ") + e.what());
  }
  return rows;
}

namespace detail
{

inline void write_text(const std::filesystem::path &path, const std::string &text)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out.flush())
    throw IoError("write failed for " + path.string());
}

} // namespace detail

/// Writes report.csv and/or report.json into `dir`; returns the written paths.
inline std::vector<std::filesystem::path> emit_report(const std::vector<ReportRow> &rows,
                                                      const std::filesystem::path &dir, ReportFormat format)
{
  if (rows.empty())
    throw ConfigError("report: no rows to emit");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> out;
  if (format != ReportFormat::Json)
  {
    out.push_back(dir / "report.csv");
    detail::write_text(out.back(), report_csv(rows));
  }
  if (format != ReportFormat::Csv)
  {
    out.push_back(dir / "report.json");
    detail::write_text(out.back(), report_json(rows));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model-level compression

struct CompressOptions
{
  bool prune_head = false;
  bool recapture = false;
  std::size_t workers = 1;
};

struct CompressionOutcome
{
  RefNetModel model;
  std::vector<SolverResult> results;
  std::vector<LayerLogEntry> log;
};

/// Weight entries that survive: mask keep-count for masked layers, full size otherwise.
inline std::size_t nonzero_params(const RefNetModel &m)
{
  std::size_t n = 0;
  for (const Layer &l : m.layers)
    if (l.has_params())
      n += l.mask ? l.mask->kept_count() : l.weight.size();
  return n;
}

namespace detail
{

inline std::vector<std::size_t> layers_to_solve(const RefNetModel &m, const CompressionConfig &config,
                                                const CompressOptions &opts)
{
  std::vector<std::size_t> out;
  const auto params = m.parametric_layers();
  for (std::size_t i : params)
  {
    if (i == m.head_index() && !opts.prune_head)
      continue;
    if (config.excludes(RefNetModel::layer_id(i)))
      continue;
    // Structured removal of a layer's inputs needs a producer to shrink.
    if (config.solver == SolverKind::ZipLM && i == params.front())
      continue;
    out.push_back(i);
  }
  return out;
}

inline std::size_t previous_parametric(const RefNetModel &m, std::size_t i)
{
  for (std::size_t j = i; j-- > 0;)
  {
    const Layer &l = m.layers[j];
    if (l.has_params())
      return j;
    if (l.kind != LayerKind::ReLU)
      break;
  }
  throw ConfigError("structured pruning of layer " + RefNetModel::layer_id(i) +
                    " needs a linear producer separated only by activations");
}

/// Applies a structured result: layer i keeps `kept` input channels and the
/// producing layer keeps the matching output rows.
inline void apply_structured(RefNetModel &m, std::size_t i, const SolverResult &r)
{
  const std::size_t p = previous_parametric(m, i);
  if (m.layers[p].kind == LayerKind::Conv1d || m.layers[i].kind == LayerKind::Conv1d)
    throw ConfigError("structured pruning supports linear layers only");
  Layer &prod = m.layers[p];
  const std::size_t keep = r.kept_channels.size();
  DenseMatrix w(keep, prod.weight.cols());
  std::vector<float> b(keep);
  std::optional<SparsityMask> mk;
  if (prod.mask)
    mk = SparsityMask::all_kept(prod.mask->layer_id, keep, prod.weight.cols());
  std::optional<QuantGrid> q;
  if (prod.quant)
    q = QuantGrid{prod.quant->bits, {}, {}, {}};
  for (std::size_t k = 0; k < keep; ++k)
  {
    const std::size_t src = r.kept_channels[k];
    std::copy(prod.weight.row(src).begin(), prod.weight.row(src).end(), w.row(k).begin());
    b[k] = prod.bias[src];
    if (mk)
      for (std::size_t c = 0; c < w.cols(); ++c)
        mk->set(k, c, prod.mask->kept(src, c));
    if (q)
    {
      q->scale.push_back(prod.quant->scale[src]);
      q->zero.push_back(prod.quant->zero[src]);
      q->degenerate.push_back(prod.quant->degenerate[src]);
    }
  }
  prod.weight = std::move(w);
  prod.bias = std::move(b);
  prod.mask = std::move(mk);
  prod.quant = std::move(q);
  prod.out_features = keep;
  for (std::size_t j = p + 1; j < i; ++j)
    m.layers[j].in_features = m.layers[j].out_features = keep;
  Layer &cons = m.layers[i];
  cons.in_features = keep;
  cons.weight = r.weight;
  cons.mask = r.mask;
  cons.quant = r.quant;
}

inline double log_sparsity(const SolverResult &r, std::size_t dense_cols)
{
  const double total = static_cast<double>(r.weight.rows() * dense_cols);
  return total == 0.0 ? 0.0 : 1.0 - static_cast<double>(r.mask.kept_count()) / total;
}

/// Solves one layer (pruning, then GPTQ when bits are set for a pruning solver)
/// and fills its log entry.
inline SolverResult solve_model_layer(const Layer &layer, std::size_t index, const DenseMatrix &x,
                                      const CompressionConfig &config, std::size_t workers, LayerLogEntry &log)
{
  const auto t0 = std::chrono::steady_clock::now();
  LayerSnapshot snap{RefNetModel::layer_id(index), layer.weight, x, std::nullopt};
  if (layer.mask && layer.mask->kept_count() != layer.mask->keep.size())
    snap.prior = layer.mask;
  SolverResult r = solve_layer(snap, config, workers);
  std::string solver = to_string(config.solver == SolverKind::HybridOBC ? hybrid_dispatch(snap, config) : config.solver);
  if (config.bits && config.solver != SolverKind::GPTQ && config.solver != SolverKind::ZipLM)
  {
    LayerSnapshot qs{snap.layer_id, r.weight, x, r.mask};
    SolverResult q = gptq_quantize(qs, compute_hessian(x, config.damping), *config.bits, &r.mask);
    r.weight = std::move(q.weight);
    r.quant = std::move(q.quant);
    solver += "+gptq";
  }
  log.layer = snap.layer_id;
  log.solver = solver;
  log.sparsity = log_sparsity(r, layer.weight.cols());
  if (r.kept_channels.empty())
  {
    log.error_before = layer_error(layer.weight, uncompensated(layer.weight, r), x);
    log.error_after = layer_error(layer.weight, r.weight, x);
  }
  else
  {
    DenseMatrix naive = layer.weight, full(layer.weight.rows(), layer.weight.cols());
    std::vector<std::uint8_t> kept(layer.weight.cols(), 0);
    for (std::size_t k : r.kept_channels)
      kept[k] = 1;
    for (std::size_t row = 0; row < naive.rows(); ++row)
    {
      for (std::size_t c = 0; c < naive.cols(); ++c)
        if (!kept[c])
          naive(row, c) = 0.0f;
      for (std::size_t k = 0; k < r.kept_channels.size(); ++k)
        full(row, r.kept_channels[k]) = r.weight(row, k);
    }
    log.error_before = layer_error(layer.weight, naive, x);
    log.error_after = layer_error(layer.weight, full, x);
  }
  log.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline void apply_result(RefNetModel &m, std::size_t i, const SolverResult &r)
{
  if (!r.kept_channels.empty())
  {
    apply_structured(m, i, r);
    return;
  }
  Layer &l = m.layers[i];
  l.weight = r.weight;
  l.mask = r.mask;
  l.quant = r.quant;
}

} // namespace detail

/// Compresses every eligible parametric layer of `model` from its activations
/// on `calib_inputs`. Existing masks act as priors, so repeated calls prune
/// monotonically. Without re-capture all activations come from one pass over
/// the input model and layers may be solved concurrently.
inline CompressionOutcome compress_model(const RefNetModel &model, const DenseMatrix &calib_inputs,
                                         const CompressionConfig &config, const CompressOptions &opts = {})
{
  config.validate();
  CompressionOutcome out{model, {}, {}};
  const auto todo = detail::layers_to_solve(model, config, opts);
  out.results.resize(todo.size());
  out.log.resize(todo.size());
  if (!opts.recapture)
  {
    const auto acts = capture_activations(model, calib_inputs);
    std::map<std::size_t, const DenseMatrix *> by_index;
    for (const auto &a : acts)
      by_index[a.layer_index] = &a.x;
    parallel_for(todo.size(), opts.workers, [&](std::size_t k) {
      const std::size_t i = todo[k];
      out.results[k] = detail::solve_model_layer(model.layers[i], i, *by_index.at(i), config, 1, out.log[k]);
    });
    for (std::size_t k = 0; k < todo.size(); ++k)
      detail::apply_result(out.model, todo[k], out.results[k]);
  }
  else
  {
    for (std::size_t k = 0; k < todo.size(); ++k)
    {
      const std::size_t i = todo[k];
      const ActivationBatch a = capture_layer(out.model, calib_inputs, i);
      out.results[k] = detail::solve_model_layer(out.model.layers[i], i, a.x, config, opts.workers, out.log[k]);
      detail::apply_result(out.model, i, out.results[k]);
    }
  }
  if (out.model.mask_violations() != 0)
    throw NumericError("compression left nonzero weights at masked positions");
  return out;
}

// ---------------------------------------------------------------------------
// Single-step flows

struct PipelineResult
{
  /// Compressed model specialized to the task (restricted head), after tuning.
  RefNetModel model;
  /// Compressed generalist used for full-task accuracy.
  RefNetModel full_model;
  ReportRow row;
  CalibrationSet calib;
  std::vector<SolverResult> results;
  std::vector<LayerLogEntry> log;
  History history;
  double wall_seconds = 0.0;
};

namespace detail
{

/// Runs f(), prefixing any toolkit error with the stage name while keeping its kind.
template <typename F> auto stage(const char *name, F &&f) -> decltype(f())
{
  const std::string p = std::string("[") + name + "] ";
  try
  {
    return f();
  }
  catch (const FormatError &e)
  {
    throw FormatError(p + e.what());
  }
  catch (const IoError &e)
  {
    throw IoError(p + e.what());
  }
  catch (const NumericError &e)
  {
    throw NumericError(p + e.what());
  }
  catch (const ConfigError &e)
  {
    throw ConfigError(p + e.what());
  }
}

inline std::string format_layer_errors(const std::vector<LayerLogEntry> &log)
{
  std::string s;
  for (const auto &e : log)
    s += (s.empty() ? "" : ";") + e.layer + ":" + format_double(e.error_after);
  return s;
}

inline std::string solver_label(const CompressionConfig &c)
{
  std::string s = to_string(c.solver);
  if (c.block > 1)
    s += "/block" + std::to_string(c.block);
  if (c.bits && c.solver != SolverKind::GPTQ)
    s += "+gptq" + std::to_string(*c.bits);
  return s;
}

/// Weight parameters of the dense model once specialized to the task.
inline std::size_t dense_task_params(const RefNetModel &dense, const TaskSpec &task)
{
  std::size_t n = 0;
  for (std::size_t i : dense.parametric_layers())
    n += i == dense.head_index() ? task.size() * dense.layers[i].weight.cols() : dense.layers[i].weight.size();
  return n;
}

/// Copies all layers except the head from `src` into `dst`.
inline void copy_backbone(RefNetModel &dst, const RefNetModel &src)
{
  const std::size_t h = dst.head_index();
  for (std::size_t i = 0; i < dst.layers.size(); ++i)
    if (i != h)
      dst.layers[i] = src.layers[i];
}

inline TrainOpts tune_defaults(const TacoJob &job, TuneKind kind)
{
  if (job.tune_opts)
    return *job.tune_opts;
  TrainOpts o = kind == TuneKind::Taco ? TrainOpts::taco_tuner()
                : kind == TuneKind::Probe ? TrainOpts::linear_probe()
                                           : TrainOpts::qat();
  o.seed = Rng::derive(job.seed, 11);
  return o;
}

enum class CalibSource
{
  Task,
  Generic
};

inline PipelineResult single_step(const TacoJob &job, const RefNetModel &dense, const DatasetSplits &data,
                                  CalibSource source, const std::string &mode)
{
  const auto t0 = std::chrono::steady_clock::now();
  stage("config", [&] {
    job.validate();
    job.task.validate(dense.class_count());
    data.train.validate();
    data.test.validate();
    if (data.train.class_count != dense.class_count())
      throw ConfigError("dataset has " + std::to_string(data.train.class_count) + " classes, model head has " +
                        std::to_string(dense.class_count()));
  });
  PipelineResult res;
  ReportRow &row = res.row;
  row.mode = mode;
  row.task = job.task.to_string();
  row.class_count = job.task.size();
  row.solver = solver_label(job.config);
  row.sparsity = job.config.sparsity;
  row.tuning = to_string(job.tuning);
  row.seed = job.seed;
  row.cell = mode + ":" + row.task + ":" + row.solver + ":" + format_double(row.sparsity);

  row.dense_subtask_accuracy = stage("evaluate", [&] { return evaluate(dense, data.test, job.task); });

  res.calib = stage("calibrate", [&] {
    CalibrationSet task_set = sample_calibration(data.train, job.task, job.calib_per_class, job.seed);
    if (source == CalibSource::Task)
    {
      task_set.provenance = "task:" + job.task.to_string() + ";k=" + std::to_string(job.calib_per_class) +
                            ";n=" + std::to_string(task_set.size()) + ";seed=" + std::to_string(job.seed) + ";" +
                            data.provenance;
      return task_set;
    }
    CalibrationSet g = sample_calibration_budget(data.train, task_set.size(), job.seed);
    g.provenance = "generic:all;n=" + std::to_string(g.size()) + ";seed=" + std::to_string(job.seed) + ";" +
                   data.provenance;
    return g;
  });
  row.calibration = res.calib.provenance;

  CompressionOutcome comp = stage("compress", [&] {
    return compress_model(dense, res.calib.inputs, job.config, {job.prune_head, job.recapture, job.workers});
  });
  res.results = std::move(comp.results);
  res.log = std::move(comp.log);
  res.full_model = std::move(comp.model);
  res.model = restrict_head(res.full_model, job.task);

  stage("tune", [&] {
    const LabeledDataset task_train = data.train.restrict_to(job.task);
    switch (job.tuning)
    {
      case TuneKind::None: break;
      case TuneKind::Probe:
      {
        TrainResult t = linear_probe(res.model, task_train, tune_defaults(job, TuneKind::Probe));
        res.model = std::move(t.model);
        res.history = std::move(t.history);
        break;
      }
      case TuneKind::Taco:
      {
        TuneResult t = taco_tune(res.model, restrict_head(dense, job.task), res.calib.inputs,
                                 tune_defaults(job, TuneKind::Taco));
        res.model = std::move(t.model);
        res.history = std::move(t.history);
        copy_backbone(res.full_model, res.model);
        break;
      }
      case TuneKind::Qat:
      {
        TrainResult t = qat_finetune(res.model, task_train, tune_defaults(job, TuneKind::Qat));
        res.model = std::move(t.model);
        res.history = std::move(t.history);
        copy_backbone(res.full_model, res.model);
        break;
      }
    }
  });

  stage("evaluate", [&] {
    row.subtask_accuracy = evaluate(res.model, data.test, job.task);
    row.full_task_accuracy = evaluate(res.full_model, data.test);
  });
  row.layer_errors = format_layer_errors(res.log);
  row.nonzero_params = nonzero_params(res.model);
  row.dense_params = dense_task_params(dense, job.task);
  row.compression_rate =
      row.nonzero_params == 0 ? 0.0 : static_cast<double>(row.dense_params) / static_cast<double>(row.nonzero_params);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Writes artifacts for a finished job. Files already written are removed if
/// any later write fails.
inline void write_artifacts(const TacoJob &job, const PipelineResult &res, const std::vector<ReportRow> &rows)
{
  if (job.output_dir.empty())
    return;
  namespace fs = std::filesystem;
  const bool existed = fs::exists(job.output_dir);
  std::vector<fs::path> written;
  try
  {
    std::error_code ec;
    fs::create_directories(job.output_dir, ec);
    if (ec)
      throw IoError("cannot create " + job.output_dir.string() + ": " + ec.message());
    auto track = [&](const fs::path &p) { written.push_back(p); };
    track(job.output_dir / "model.taco");
    save_model(written.back(), res.model, {{"task", job.task.to_string()}, {"mode", res.row.mode}});
    track(job.output_dir / "compressed.taco");
    write_container(written.back(), solver_result_tensors(res.results));
    track(job.output_dir / "calibration.taco");
    write_container(written.back(), calibration_tensors(res.calib), {{"provenance", res.calib.provenance}});
    std::string log;
    for (const auto &e : res.log)
      log += e.to_json().dump() + "\n";
    track(job.output_dir / "layer_errors.jsonl");
    write_text(written.back(), log);
    if (!res.history.empty())
    {
      std::string h;
      for (const auto &e : history_json_lines(res.history))
        h += e.dump() + "\n";
      track(job.output_dir / "history.jsonl");
      write_text(written.back(), h);
    }
    nlohmann::json timings{{"wall_seconds", res.wall_seconds}, {"layers", nlohmann::json::array()}};
    for (const auto &e : res.log)
      timings["layers"].push_back({{"layer", e.layer}, {"millis", e.millis}});
    track(job.output_dir / "timings.json");
    write_text(written.back(), timings.dump(2) + "\n");
    for (const auto &p : emit_report(rows, job.output_dir, job.report))
      track(p);
  }
  catch (...)
  {
    std::error_code ec;
    for (const auto &p : written)
      fs::remove(p, ec);
    if (!existed)
      fs::remove(job.output_dir, ec);
    throw;
  }
}

} // namespace detail

/// Task-aware compression: calibration from the task's classes only.
inline PipelineResult run_taco(const TacoJob &job, const RefNetModel &dense, const DatasetSplits &data)
{
  PipelineResult r = detail::single_step(job, dense, data, detail::CalibSource::Task, "taco");
  detail::stage("write", [&] { detail::write_artifacts(job, r, {r.row}); });
  return r;
}

/// Generic post-training compression with the same calibration budget as the TACO job.
inline PipelineResult run_ptc(const TacoJob &job, const RefNetModel &dense, const DatasetSplits &data)
{
  PipelineResult r = detail::single_step(job, dense, data, detail::CalibSource::Generic, "ptc");
  detail::stage("write", [&] { detail::write_artifacts(job, r, {r.row}); });
  return r;
}

/// Prune (block pattern, job solver) -> GPTQ per layer -> QAT on the task.
inline PipelineResult run_prune_quantize(const TacoJob &job, const RefNetModel &dense, const DatasetSplits &data)
{
  detail::stage("config", [&] {
    if (!job.config.bits)
      throw ConfigError("quantize: bits must be set");
    if (job.config.solver == SolverKind::GPTQ || job.config.solver == SolverKind::ZipLM)
      throw ConfigError("quantize: pruning solver must be unstructured (got " + to_string(job.config.solver) + ")");
  });
  TacoJob q = job;
  q.tuning = TuneKind::Qat;
  PipelineResult r = detail::single_step(q, dense, data, detail::CalibSource::Task, "quantize");
  detail::stage("write", [&] { detail::write_artifacts(q, r, {r.row}); });
  return r;
}

struct LoadedInputs
{
  RefNetModel model;
  DatasetSplits data;
};

inline LoadedInputs load_inputs(const TacoJob &job)
{
  return detail::stage("load", [&] { return LoadedInputs{load_model(job.model_path), load_dataset(job.data_path)}; });
}

inline PipelineResult run_taco(const TacoJob &job)
{
  const auto in = load_inputs(job);
  return run_taco(job, in.model, in.data);
}

inline PipelineResult run_ptc(const TacoJob &job)
{
  const auto in = load_inputs(job);
  return run_ptc(job, in.model, in.data);
}

inline PipelineResult run_prune_quantize(const TacoJob &job)
{
  const auto in = load_inputs(job);
  return run_prune_quantize(job, in.model, in.data);
}

// ---------------------------------------------------------------------------
// Gradual

struct GradualOpts
{
  double target = 0.875;
  std::size_t finetune_epochs = 25;
  /// Compress once to the target and finetune for the cumulative epoch count
  /// of the equivalent gradual schedule.
  bool single_step = false;
  /// Finetuning optimizer; epochs are taken from finetune_epochs.
  TrainOpts finetune = TrainOpts::supervised();
};

/// Cumulative sparsity after each round: halve the remaining weights until the
/// target, with a final partial round when the target is not 1 - 0.5^k.
inline std::vector<double> gradual_schedule(double target)
{
  if (!(target > 0.0 && target < 1.0))
    throw ConfigError("gradual: target sparsity must be in (0, 1)");
  std::vector<double> s;
  double cur = 0.0;
  while (cur < target - 1e-12)
  {
    double next = 1.0 - (1.0 - cur) / 2.0;
    if (next > target + 1e-12)
      next = target;
    s.push_back(next);
    cur = next;
  }
  return s;
}

struct GradualResult
{
  RefNetModel model;
  std::vector<ReportRow> rounds;
  /// Per round, the masks of the compressed layers in layer order.
  std::vector<std::vector<SparsityMask>> round_masks;
  std::vector<LayerLogEntry> log;
};

/// Starting point on the task: restricted head when the model already covers
/// the dataset's classes, otherwise a new head fitted by linear probing.
inline RefNetModel task_start_model(const RefNetModel &model, const DatasetSplits &data, const TaskSpec &task,
                                    std::uint64_t seed)
{
  if (model.class_count() == data.train.class_count)
    return restrict_head(model, task);
  RefNetModel m = replace_head(model, task.size(), Rng::derive(seed, 21));
  TrainOpts o = TrainOpts::linear_probe();
  o.seed = Rng::derive(seed, 22);
  return linear_probe(m, data.train.restrict_to(task), o).model;
}

inline GradualResult gradual_taco(const TacoJob &job, const GradualOpts &opts, const RefNetModel &model,
                                  const DatasetSplits &data)
{
  const auto schedule = detail::stage("config", [&] {
    job.validate();
    job.task.validate(data.train.class_count);
    return gradual_schedule(opts.target);
  });
  const LabeledDataset task_train = data.train.restrict_to(job.task);
  RefNetModel cur = detail::stage("prepare", [&] { return task_start_model(model, data, job.task, job.seed); });
  const double dense_acc = detail::stage("evaluate", [&] { return evaluate(cur, data.test, job.task); });
  const std::size_t dense_params = nonzero_params(cur);
  const CalibrationSet calib = detail::stage("calibrate", [&] {
    CalibrationSet c = sample_calibration(data.train, job.task, job.calib_per_class, job.seed);
    c.provenance = "task:" + job.task.to_string() + ";k=" + std::to_string(job.calib_per_class) +
                   ";n=" + std::to_string(c.size()) + ";seed=" + std::to_string(job.seed) + ";" + data.provenance;
    return c;
  });

  std::vector<double> steps = schedule;
  std::size_t epochs = opts.finetune_epochs;
  if (opts.single_step)
  {
    steps = {opts.target};
    epochs *= schedule.size();
  }
  GradualResult res;
  for (std::size_t k = 0; k < steps.size(); ++k)
  {
    const std::string round = std::to_string(k + 1);
    CompressionConfig c = job.config;
    c.sparsity = steps[k];
    CompressionOutcome comp = detail::stage(("compress round " + round).c_str(), [&] {
      return compress_model(cur, calib.inputs, c, {job.prune_head, job.recapture, job.workers});
    });
    cur = std::move(comp.model);
    res.log.insert(res.log.end(), comp.log.begin(), comp.log.end());
    TrainOpts ft = opts.finetune;
    ft.epochs = epochs;
    ft.seed = Rng::derive(job.seed, 100 + k);
    cur = detail::stage(("finetune round " + round).c_str(), [&] { return train_supervised(cur, task_train, ft).model; });
    std::vector<SparsityMask> masks;
    for (const auto &r : comp.results)
      masks.push_back(*cur.layers.at(static_cast<std::size_t>(std::stoul(r.layer_id))).mask);
    res.round_masks.push_back(std::move(masks));

    ReportRow row;
    row.mode = opts.single_step ? "single-step" : "gradual";
    row.task = job.task.to_string();
    row.class_count = job.task.size();
    row.solver = detail::solver_label(c);
    row.sparsity = steps[k];
    row.tuning = "finetune:" + std::to_string(epochs);
    row.seed = job.seed;
    row.cell = row.mode + ":" + row.task + ":" + row.solver + ":" + detail::format_double(row.sparsity) + ":round" + round;
    row.dense_subtask_accuracy = dense_acc;
    row.subtask_accuracy = detail::stage("evaluate", [&] { return evaluate(cur, data.test, job.task); });
    // The gradual model only has the task's head, so its full task is the subtask.
    row.full_task_accuracy = row.subtask_accuracy;
    row.nonzero_params = nonzero_params(cur);
    row.dense_params = dense_params;
    row.compression_rate = row.nonzero_params == 0 ? 0.0
                                                   : static_cast<double>(dense_params) /
                                                         static_cast<double>(row.nonzero_params);
    row.layer_errors = detail::format_layer_errors(comp.log);
    row.calibration = calib.provenance;
    res.rounds.push_back(std::move(row));
  }
  res.model = std::move(cur);
  if (!job.output_dir.empty())
  {
    PipelineResult pr;
    pr.model = res.model;
    pr.calib = calib;
    pr.log = res.log;
    pr.row = res.rounds.back();
    detail::stage("write", [&] { detail::write_artifacts(job, pr, res.rounds); });
  }
  return res;
}

inline GradualResult gradual_taco(const TacoJob &job, const GradualOpts &opts)
{
  const auto in = load_inputs(job);
  return gradual_taco(job, opts, in.model, in.data);
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepCell
{
  TaskSpec task;
  SolverKind solver = SolverKind::HybridOBC;
  double sparsity = 0.0;
};

struct SweepGrid
{
  std::vector<TaskSpec> tasks;
  std::vector<SolverKind> solvers{SolverKind::HybridOBC};
  std::vector<double> sparsities{0.6, 0.7, 0.8};

  std::vector<SweepCell> cells() const
  {
    std::vector<SweepCell> out;
    for (const auto &t : tasks)
      for (SolverKind s : solvers)
        for (double sp : sparsities)
          out.push_back({t, s, sp});
    return out;
  }
};

struct DropSummary
{
  std::size_t class_count = 0;
  double mean_relative_drop = 0.0;
  std::size_t cells = 0;
};

struct SweepReport
{
  std::vector<ReportRow> rows;
  std::vector<DropSummary> summary;
};

inline double relative_drop(const ReportRow &r)
{
  return r.dense_subtask_accuracy > 0.0 ? (r.dense_subtask_accuracy - r.subtask_accuracy) / r.dense_subtask_accuracy
                                        : 0.0;
}

/// Mean relative subtask accuracy drop per class count over successful rows.
inline std::vector<DropSummary> summarize_drops(const std::vector<ReportRow> &rows)
{
  std::map<std::size_t, DropSummary> by;
  for (const auto &r : rows)
  {
    if (!r.ok())
      continue;
    auto &s = by[r.class_count];
    s.class_count = r.class_count;
    s.mean_relative_drop += relative_drop(r);
    ++s.cells;
  }
  std::vector<DropSummary> out;
  for (auto &[k, s] : by)
  {
    s.mean_relative_drop /= static_cast<double>(s.cells);
    out.push_back(s);
  }
  return out;
}

/// One sweep cell as an independent TACO job; failures are recorded in the row.
inline ReportRow run_cell(const TacoJob &base, const SweepCell &cell, const RefNetModel &dense,
                          const DatasetSplits &data)
{
  TacoJob job = base;
  job.task = cell.task;
  job.config.solver = cell.solver;
  job.config.sparsity = cell.sparsity;
  job.workers = 1;
  ReportRow row;
  row.mode = "taco";
  row.task = cell.task.to_string();
  row.class_count = cell.task.size();
  row.solver = detail::solver_label(job.config);
  row.sparsity = cell.sparsity;
  row.tuning = to_string(job.tuning);
  row.seed = job.seed;
  row.cell = row.mode + ":" + row.task + ":" + row.solver + ":" + detail::format_double(row.sparsity);
  if (!base.output_dir.empty())
  {
    std::string dir = row.task + "_" + row.solver + "_" + detail::format_double(row.sparsity);
    for (char &c : dir)
      if (c == ',' || c == '/' || c == ':')
        c = '-';
    job.output_dir = base.output_dir / "cells" / dir;
  }
  try
  {
    return run_taco(job, dense, data).row;
  }
  catch (const std::exception &e)
  {
    row.status = std::string("error: ") + e.what();
    return row;
  }
}

inline SweepReport sweep(const TacoJob &base, const SweepGrid &grid, const RefNetModel &dense,
                         const DatasetSplits &data)
{
  const auto cells = grid.cells();
  if (cells.empty())
    throw ConfigError("sweep: empty grid");
  SweepReport rep;
  rep.rows.resize(cells.size());
  parallel_for(cells.size(), base.workers,
               [&](std::size_t i) { rep.rows[i] = run_cell(base, cells[i], dense, data); });
  rep.summary = summarize_drops(rep.rows);
  if (!base.output_dir.empty())
  {
    detail::stage("write", [&] {
      emit_report(rep.rows, base.output_dir, base.report);
      nlohmann::json s = nlohmann::json::array();
      for (const auto &d : rep.summary)
        s.push_back({{"class_count", d.class_count}, {"mean_relative_drop", d.mean_relative_drop}, {"cells", d.cells}});
      detail::write_text(base.output_dir / "summary.json", s.dump(2) + "\n");
    });
  }
  return rep;
}

inline SweepReport sweep(const TacoJob &base, const SweepGrid &grid)
{
  const auto in = load_inputs(base);
  return sweep(base, grid, in.model, in.data);
}

// ---------------------------------------------------------------------------
// Toy generalist

/// ReLU MLP over the dataset's classes trained with the supervised defaults.
inline RefNetModel train_toy_generalist(const LabeledDataset &train, std::uint64_t seed,
                                        const std::vector<std::size_t> &hidden = {32, 32}, std::size_t epochs = 10)
{
  RefNetModel m = build_model(ArchSpec::mlp(train.dim(), hidden, train.class_count), Rng::derive(seed, 31));
  TrainOpts o = TrainOpts::supervised();
  o.epochs = epochs;
  o.seed = Rng::derive(seed, 32);
  return train_supervised(m, train, o).model;
}

} // namespace taco

#endif // TACO_PIPELINE_HPP
