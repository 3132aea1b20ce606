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

#include "taco/taco.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

namespace
{

using namespace taco;

enum ExitCode
{
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kNumeric = 3,
  kIo = 4
};

/// Flags shared by the compression subcommands.
struct CommonArgs
{
  std::string model;
  std::string data;
  std::string task;
  double sparsity = 0.0;
  std::string solver = "hybrid";
  std::string pattern = "unstructured";
  unsigned bits = 0;
  std::string tune = "none";
  std::size_t calib_per_class = 5;
  std::uint64_t seed = 0;
  std::string out;
  std::string report = "both";
  std::size_t workers = 1;
  bool prune_head = false;
  bool recapture = false;
};

void add_io(CLI::App *sub, CommonArgs &a)
{
  sub->add_option("--model", a.model, "Generalist model container")->required();
  sub->add_option("--data", a.data, "Dataset container")->required();
}

/// Everything except --task and --solver, which sweep takes as lists.
void add_common(CLI::App *sub, CommonArgs &a)
{
  add_io(sub, a);
  sub->add_option("--sparsity", a.sparsity, "Target sparsity in [0, 1)");
  sub->add_option("--pattern", a.pattern, "unstructured or block:N");
  sub->add_option("--bits", a.bits, "Quantize to this many bits after pruning (8)");
  sub->add_option("--tune", a.tune, "none, probe, taco or qat");
  sub->add_option("--calib-per-class", a.calib_per_class, "Calibration samples per task class");
  sub->add_option("--seed", a.seed, "Random seed");
  sub->add_option("--out", a.out, "Output directory for artifacts");
  sub->add_option("--report", a.report, "csv, json or both");
  sub->add_option("--workers", a.workers, "Worker threads");
  sub->add_flag("--prune-head", a.prune_head, "Also compress the classifier head");
  sub->add_flag("--recapture", a.recapture, "Re-capture activations after each layer");
}

void add_single(CLI::App *sub, CommonArgs &a)
{
  add_common(sub, a);
  sub->add_option("--task", a.task, "Class ids (comma separated) or @file")->required();
  sub->add_option("--solver", a.solver, "magnitude, adaprune, obc, fastobc, hybrid, ziplm or gptq");
}

TacoJob make_job(const CommonArgs &a)
{
  TacoJob j;
  j.model_path = a.model;
  j.data_path = a.data;
  if (!a.task.empty())
    j.task = TaskSpec::parse(a.task);
  j.config.solver = solver_from_string(a.solver);
  j.config.sparsity = a.sparsity;
  j.config.block = block_from_pattern(a.pattern);
  if (a.bits != 0)
    j.config.bits = a.bits;
  j.tuning = tune_from_string(a.tune);
  j.calib_per_class = a.calib_per_class;
  j.seed = a.seed;
  j.output_dir = a.out;
  j.report = report_format_from_string(a.report);
  j.workers = std::max<std::size_t>(1, a.workers);
  j.prune_head = a.prune_head;
  j.recapture = a.recapture;
  return j;
}

int run_main(int argc, char **argv)
{
  CLI::App app{"Task-aware compression of pretrained classifiers"};
  app.require_subcommand(1);

  CommonArgs args;
  auto *run = app.add_subcommand("run", "Task-aware compression with task calibration data");
  add_single(run, args);
  auto *ptc = app.add_subcommand("ptc", "Generic compression with calibration data from all classes");
  add_single(ptc, args);

  auto *gradual = app.add_subcommand("gradual", "Iterative prune and finetune rounds");
  add_single(gradual, args);
  GradualOpts gopts;
  gradual->add_option("--target", gopts.target, "Final sparsity");
  gradual->add_option("--finetune-epochs", gopts.finetune_epochs, "Finetune epochs per round");
  gradual->add_flag("--single-step", gopts.single_step, "One round with the cumulative epoch count");

  auto *quantize = app.add_subcommand("quantize", "Prune, quantize, then quantization-aware finetune");
  add_single(quantize, args);

  auto *sweep_cmd = app.add_subcommand("sweep", "Grid over tasks, solvers and sparsities");
  add_common(sweep_cmd, args);
  std::vector<std::string> sweep_tasks;
  std::vector<std::string> sweep_solvers{"hybrid"};
  std::vector<double> sweep_sparsities{0.6, 0.7, 0.8};
  sweep_cmd->add_option("--task", sweep_tasks, "Task per occurrence (ids or @file)")->required();
  sweep_cmd->add_option("--solver", sweep_solvers, "Solver per occurrence");
  sweep_cmd->add_option("--sparsities", sweep_sparsities, "Sparsity levels")->delimiter(',');

  auto *eval = app.add_subcommand("eval", "Accuracy of a model on a dataset's test split");
  add_io(eval, args);
  eval->add_option("--task", args.task, "Restrict to these class ids (ids or @file)");

  auto *synth = app.add_subcommand("synth-data", "Write a synthetic benchmark and a trained toy generalist");
  SynthSpec sspec;
  std::vector<std::size_t> hidden{32, 32};
  std::size_t epochs = 10;
  synth->add_option("--out", args.out, "Output directory")->required();
  synth->add_option("--seed", sspec.seed, "Random seed");
  synth->add_option("--classes", sspec.classes, "Class count");
  synth->add_option("--groups", sspec.groups, "Supergroup count");
  synth->add_option("--dim", sspec.dim, "Input dimension");
  synth->add_option("--train-per-class", sspec.train_per_class, "Training samples per class");
  synth->add_option("--test-per-class", sspec.test_per_class, "Test samples per class");
  synth->add_option("--hidden", hidden, "Hidden layer widths")->delimiter(',');
  synth->add_option("--epochs", epochs, "Generalist training epochs");

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError &e)
  {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  auto print_rows = [](const std::vector<ReportRow> &rows) { std::cout << report_csv(rows); };

  if (*run || *ptc || *quantize)
  {
    const TacoJob job = make_job(args);
    const PipelineResult r = *run ? run_taco(job) : *ptc ? run_ptc(job) : run_prune_quantize(job);
    print_rows({r.row});
  }
  else if (*gradual)
  {
    const GradualResult r = gradual_taco(make_job(args), gopts);
    print_rows(r.rounds);
  }
  else if (*sweep_cmd)
  {
    const TacoJob base = make_job(args);
    SweepGrid grid;
    for (const auto &t : sweep_tasks)
      grid.tasks.push_back(TaskSpec::parse(t));
    grid.solvers.clear();
    for (const auto &s : sweep_solvers)
      grid.solvers.push_back(solver_from_string(s));
    grid.sparsities = sweep_sparsities;
    const SweepReport rep = sweep(base, grid);
    print_rows(rep.rows);
    for (const auto &d : rep.summary)
      std::cerr << "classes=" << d.class_count << " mean_relative_drop=" << d.mean_relative_drop
                << " cells=" << d.cells << "\n";
  }
  else if (*eval)
  {
    const RefNetModel m = load_model(args.model);
    const DatasetSplits d = load_dataset(args.data);
    std::optional<TaskSpec> task;
    if (!args.task.empty())
      task = TaskSpec::parse(args.task);
    if (task && m.class_count() != d.test.class_count)
    {
      // a task-specialized model: its head already covers exactly the task
      if (m.class_count() != task->size())
        throw ConfigError("eval: model has " + std::to_string(m.class_count()) + " classes, task has " +
                          std::to_string(task->size()));
      const LabeledDataset sub = d.test.restrict_to(*task);
      nlohmann::ordered_json j{{"task", task->to_string()}, {"samples", sub.size()}, {"accuracy", evaluate(m, sub)}};
      std::cout << j.dump() << "\n";
      return kOk;
    }
    nlohmann::ordered_json j{{"task", task ? task->to_string() : std::string("all")},
                             {"samples", task ? d.test.restrict_to(*task).size() : d.test.size()},
                             {"accuracy", evaluate(m, d.test, task)}};
    std::cout << j.dump() << "\n";
  }
  else if (*synth)
  {
    const DatasetSplits d = make_synthetic(sspec);
    const RefNetModel m = train_toy_generalist(d.train, sspec.seed, hidden, epochs);
    const std::filesystem::path out = args.out;
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec)
      throw IoError("cannot create " + out.string() + ": " + ec.message());
    save_dataset(out / "data.taco", d);
    save_model(out / "model.taco", m, {{"provenance", d.provenance}});
    nlohmann::ordered_json j{{"data", (out / "data.taco").string()},
                             {"model", (out / "model.taco").string()},
                             {"test_accuracy", evaluate(m, d.test)}};
    std::cout << j.dump() << "\n";
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv)
{
  try
  {
    return run_main(argc, argv);
  }
  catch (const taco::ConfigError &e)
  {
    std::cerr << "taco: config error: " << e.what() << "\n";
    return kConfig;
  }
  catch (const taco::NumericError &e)
  {
    std::cerr << "taco: numeric error: " << e.what() << "\n";
    return kNumeric;
  }
  catch (const taco::FormatError &e)
  {
    std::cerr << "taco: format error: " << e.what() << "\n";
    return kIo;
  }
  catch (const taco::IoError &e)
  {
    std::cerr << "taco: I/O error: " << e.what() << "\n";
    return kIo;
  }
  catch (const std::exception &e)
  {
    std::cerr << "taco: internal error: " << e.what() << "\n";
    return kInternal;
  }
}
