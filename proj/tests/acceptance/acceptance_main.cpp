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

// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 = all passed).

#include "../oracles.hpp"
#include "taco/taco.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace
{

using namespace taco;
namespace fs = std::filesystem;

struct Verdict
{
  bool pass = false;
  std::string detail;
};

std::string fmt(const char *f, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

CompressionConfig cfg(SolverKind s, double sparsity, std::size_t block = 1)
{
  CompressionConfig c;
  c.solver = s;
  c.sparsity = sparsity;
  c.block = block;
  return c;
}

LayerSnapshot random_layer(std::size_t rows, std::size_t d, std::size_t n, Rng &rng)
{
  return {"0", oracle::random_matrix(rows, d, rng), oracle::correlated_inputs(d, n, rng), std::nullopt};
}

std::string slurp(const fs::path &p)
{
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Verdict obc_first_removal()
{
  Rng rng(1001);
  int index_ok = 0, error_ok = 0;
  double worst = 0.0;
  const int layers = 50;
  for (int t = 0; t < layers; ++t)
  {
    const LayerSnapshot l = random_layer(4, 8, 32, rng);
    // 1/8 of each 8-wide row: exactly one removal per row
    const auto r = obc_prune(l, compute_hessian(l.x, 0.01), cfg(SolverKind::OBC, 0.125));
    const auto xm = oracle::to_mat(l.x);
    const double damp = oracle::damping_value(xm, 0.01);
    bool all_idx = true;
    oracle::Mat w0m = oracle::to_mat(l.weight), best_rows(4);
    for (std::size_t row = 0; row < 4; ++row)
    {
      const oracle::Vec &w0 = w0m[row];
      std::size_t best = 0;
      double best_err = std::numeric_limits<double>::infinity();
      for (std::size_t p = 0; p < 8; ++p)
      {
        std::vector<bool> keep(8, true);
        keep[p] = false;
        const auto refit = oracle::ridge_refit(w0, xm, keep, damp);
        const double e = oracle::damped_row_error(w0, refit, xm, damp);
        if (e < best_err)
        {
          best_err = e;
          best = p;
          best_rows[row] = refit;
        }
      }
      all_idx = all_idx && !r.mask.kept(row, best) && r.mask.pruned_in_row(row) == 1;
    }
    index_ok += all_idx ? 1 : 0;
    const double want = oracle::layer_error(w0m, best_rows, xm);
    const double got = oracle::layer_error(w0m, oracle::to_mat(r.weight), xm);
    const double rel = std::abs(got - want) / std::max(want, 1e-300);
    worst = std::max(worst, rel);
    error_ok += rel <= 1e-6 ? 1 : 0;
  }
  return {index_ok == layers && error_ok == layers,
          fmt("index match %d/%d, error within 1e-6 rel %d/%d (worst %.2e)", index_ok, layers, error_ok, layers, worst)};
}

Verdict solver_ordering()
{
  std::string detail;
  bool pass = true;
  for (double sp : {0.5, 0.75})
  {
    Rng rng(2002 + static_cast<std::uint64_t>(sp * 100));
    double e_obc = 0, e_fast = 0, e_ada = 0, e_mag = 0;
    for (int t = 0; t < 20; ++t)
    {
      const LayerSnapshot l = random_layer(32, 64, 256, rng);
      const auto ws = compute_hessian(l.x, 0.01);
      e_obc += layer_error(l.weight, obc_prune(l, ws, cfg(SolverKind::OBC, sp)).weight, l.x);
      e_fast += layer_error(l.weight, fastobc_prune(l, ws, cfg(SolverKind::FastOBC, sp)).weight, l.x);
      e_ada += layer_error(l.weight, adaprune(l, cfg(SolverKind::AdaPrune, sp)).weight, l.x);
      e_mag += layer_error(l.weight, magnitude_prune(l, cfg(SolverKind::Magnitude, sp)).weight, l.x);
    }
    const bool ok = e_obc <= e_fast && e_fast <= e_ada && e_ada <= e_mag;
    pass = pass && ok;
    detail += fmt("%ss=%.2f obc %.4g %s fastobc %.4g %s adaprune %.4g %s magnitude %.4g", detail.empty() ? "" : "; ",
                  sp, e_obc / 20, e_obc <= e_fast ? "<=" : ">", e_fast / 20, e_fast <= e_ada ? "<=" : ">", e_ada / 20,
                  e_ada <= e_mag ? "<=" : ">", e_mag / 20);
  }
  return {pass, detail};
}

Verdict diagonal_degeneracy()
{
  Rng rng(3003);
  int same = 0;
  for (int t = 0; t < 20; ++t)
  {
    const DenseMatrix x = oracle::orthogonal_inputs(16, 48, rng);
    const LayerSnapshot l{"0", oracle::random_matrix(8, 16, rng), x, std::nullopt};
    const auto ws = compute_hessian(l.x, 0.01);
    const double sp = 0.25 + 0.025 * t;
    const auto a = obc_prune(l, ws, cfg(SolverKind::OBC, sp));
    const auto b = fastobc_prune(l, ws, cfg(SolverKind::FastOBC, sp));
    const auto c = magnitude_prune(l, cfg(SolverKind::Magnitude, sp));
    same += (a.mask == c.mask && b.mask == c.mask) ? 1 : 0;
  }
  return {same == 20, fmt("identical masks on %d/20 layers", same)};
}

Verdict taco_beats_ptc()
{
  int sub_wins = 0, full_wins = 0;
  double min_full = 1.0;
  std::string per;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
  {
    SynthSpec s;
    s.seed = seed;
    const DatasetSplits data = make_synthetic(s);
    const RefNetModel m = train_toy_generalist(data.train, seed);
    min_full = std::min(min_full, evaluate(m, data.test));
    TacoJob job;
    job.task = synthetic_task(s, 4, seed);
    job.config.solver = SolverKind::HybridOBC;
    job.config.sparsity = 0.9;
    job.calib_per_class = 5;
    job.tuning = TuneKind::Probe;
    job.seed = seed;
    const ReportRow a = run_taco(job, m, data).row;
    const ReportRow b = run_ptc(job, m, data).row;
    sub_wins += a.subtask_accuracy > b.subtask_accuracy ? 1 : 0;
    full_wins += b.full_task_accuracy > a.full_task_accuracy ? 1 : 0;
    per += fmt(" [%.3f/%.3f %.3f/%.3f]", a.subtask_accuracy, b.subtask_accuracy, a.full_task_accuracy,
               b.full_task_accuracy);
  }
  return {min_full >= 0.9 && sub_wins >= 4 && full_wins >= 3,
          fmt("generalist full acc >= %.3f; TACO sub > PTC sub %d/5; PTC full > TACO full %d/5;", min_full, sub_wins,
              full_wins) +
              per};
}

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double> &a, const std::vector<double> &b)
{
  auto ranks = [](const std::vector<double> &v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
      idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();)
    {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
        ++j;
      for (std::size_t k = i; k <= j; ++k)
        r[idx[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i)
  {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

Verdict complexity_monotonicity()
{
  std::map<std::size_t, double> drop;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
  {
    SynthSpec s;
    s.seed = seed;
    const DatasetSplits data = make_synthetic(s);
    const RefNetModel m = train_toy_generalist(data.train, seed);
    TacoJob base;
    base.seed = seed;
    base.workers = 4;
    SweepGrid grid;
    grid.solvers = {SolverKind::FastOBC};
    grid.sparsities = {0.8};
    for (std::size_t size : {2u, 4u, 8u, 16u})
      for (std::size_t i = 0; i < s.classes / size; ++i)
        grid.tasks.push_back(synthetic_task(s, size, i));
    const SweepReport rep = sweep(base, grid, m, data);
    for (const auto &d : rep.summary)
      drop[d.class_count] += d.mean_relative_drop / 5.0;
  }
  std::vector<double> k, v;
  std::string detail;
  for (const auto &[c, d] : drop)
  {
    k.push_back(static_cast<double>(c));
    v.push_back(d);
    detail += fmt(" %zu:%.4f", c, d);
  }
  const double rho = spearman(k, v);
  return {rho >= 0.8, fmt("spearman rho %.3f; mean relative drop by class count", rho) + detail};
}

Verdict tuner_contract()
{
  int runs = 0, masks_ok = 0, best_ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
  {
    SynthSpec s;
    s.classes = 8;
    s.groups = 2;
    s.dim = 16;
    s.train_per_class = 60;
    s.test_per_class = 10;
    s.seed = seed;
    const DatasetSplits data = make_synthetic(s);
    const RefNetModel dense = train_toy_generalist(data.train, seed, {24, 24}, 3);
    const TaskSpec task = synthetic_task(s, 2, seed);
    const CalibrationSet calib = sample_calibration(data.train, task, 5, seed);
    const RefNetModel dense_task = restrict_head(dense, task);
    for (double lr : {1e-4, 1e-2, 1.0})
    {
      RefNetModel sparse = compress_model(dense_task, calib.inputs, cfg(SolverKind::HybridOBC, 0.8), {true}).model;
      TrainOpts o = TrainOpts::taco_tuner();
      o.lr = lr;
      o.epochs = 20;
      o.seed = seed;
      const TuneResult r = taco_tune(sparse, dense_task, calib.inputs, o);
      ++runs;
      bool zeros = r.model.mask_violations() == 0;
      for (std::size_t i : sparse.parametric_layers())
        zeros = zeros && r.model.layers[i].mask == sparse.layers[i].mask;
      masks_ok += zeros ? 1 : 0;
      best_ok += r.best_objective <= r.initial_objective ? 1 : 0;
    }
  }
  // identical sparse and dense models are a fixed point
  SynthSpec s;
  s.classes = 4;
  s.groups = 2;
  s.dim = 8;
  s.train_per_class = 20;
  s.test_per_class = 5;
  const DatasetSplits data = make_synthetic(s);
  RefNetModel dense = build_model(ArchSpec::mlp(8, {10}, 4), 3);
  const RefNetModel before = dense;
  const TuneResult same = taco_tune(dense, dense, data.train.inputs);
  bool unchanged = true;
  for (std::size_t i = 0; i < dense.layers.size(); ++i)
    unchanged = unchanged && same.model.layers[i].weight == before.layers[i].weight &&
                same.model.layers[i].bias == before.layers[i].bias;
  return {masks_ok == runs && best_ok == runs && unchanged,
          fmt("masked zeros kept %d/%d; best <= initial %d/%d; identical inputs unchanged: %s", masks_ok, runs,
              best_ok, runs, unchanged ? "yes" : "no")};
}

Verdict gradient_check()
{
  const std::vector<ArchSpec> archs{
      ArchSpec::mlp(8, {12, 10}, 4),
      ArchSpec{12, {LayerSpec::conv1d(2, 3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::head(4)}}};
  std::size_t checked = 0, bad = 0, max_params = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    for (const ArchSpec &spec : archs)
      for (LossKind kind : {LossKind::CrossEntropy, LossKind::LogitL2})
      {
        RefNetModel m = build_model(spec, seed);
        max_params = std::max(max_params, m.parameter_count());
        Rng rng(seed * 7 + 1);
        const MatrixD x = oracle::random_matrix(6, spec.input_dim, rng).cast<double>();
        BatchTargets t;
        if (kind == LossKind::CrossEntropy)
          for (int i = 0; i < 6; ++i)
            t.labels.push_back(rng.index(4));
        else
          t.logits = oracle::random_matrix(6, 4, rng).cast<double>();
        const Gradients g = backward(m, x, kind, t);
        auto check = [&](float &p, double analytic) {
          const float saved = p;
          p = static_cast<float>(saved + 1e-4);
          const double up = p;
          const double lp = loss_value(forward(m, x), kind, t);
          p = static_cast<float>(saved - 1e-4);
          const double down = p;
          const double lm = loss_value(forward(m, x), kind, t);
          p = saved;
          const double fd = (lp - lm) / (up - down);
          const double scale = std::max(std::abs(fd), std::abs(analytic));
          const double rel = scale < 1e-6 ? 0.0 : std::abs(fd - analytic) / scale;
          worst = std::max(worst, rel);
          bad += rel > 1e-2 ? 1 : 0;
          ++checked;
        };
        for (std::size_t li : m.parametric_layers())
        {
          for (std::size_t k = 0; k < m.layers[li].weight.size(); ++k)
            check(m.layers[li].weight.values()[k], g.weight[li].values()[k]);
          for (std::size_t k = 0; k < m.layers[li].bias.size(); ++k)
            check(m.layers[li].bias[k], g.bias[li][k]);
        }
      }
  return {bad == 0 && max_params <= 1000,
          fmt("%zu parameter gradients, %zu beyond 1e-2 rel (worst %.2e), largest model %zu params", checked, bad,
              worst, max_params)};
}

Verdict gradual_rounds()
{
  bool arithmetic = true;
  int wins = 0;
  std::string per;
  const TaskSpec a{"A", {0, 1, 2, 3, 4, 5, 6, 7}}, b{"B", {8, 9, 10, 11, 12, 13, 14, 15}};
  for (std::uint64_t seed = 0; seed < 5; ++seed)
  {
    SynthSpec s;
    s.seed = seed;
    const DatasetSplits data = make_synthetic(s);
    const RefNetModel pre = train_toy_generalist(data.train.restrict_to(a), seed);
    TacoJob job;
    job.task = b;
    job.seed = seed;
    job.config.solver = SolverKind::HybridOBC;
    if (seed == 0)
    {
      GradualOpts g;
      g.target = 0.875;
      const GradualResult r = gradual_taco(job, g, pre, data);
      arithmetic = r.rounds.size() == 3 && r.rounds[0].sparsity == 0.5 && r.rounds[1].sparsity == 0.75 &&
                   r.rounds[2].sparsity == 0.875;
      for (std::size_t k = 1; k < r.round_masks.size(); ++k)
        for (std::size_t l = 0; l < r.round_masks[k].size(); ++l)
          arithmetic = arithmetic && r.round_masks[k][l].nested_in(r.round_masks[k - 1][l]);
    }
    GradualOpts g;
    g.target = 0.96875;
    const double gradual = gradual_taco(job, g, pre, data).rounds.back().subtask_accuracy;
    g.single_step = true;
    const double single = gradual_taco(job, g, pre, data).rounds.back().subtask_accuracy;
    wins += gradual > single ? 1 : 0;
    per += fmt(" [%.3f/%.3f]", gradual, single);
  }
  return {arithmetic && wins >= 4,
          fmt("0.875 in 3 nested rounds: %s; gradual > single-step at 0.96875 %d/5;", arithmetic ? "yes" : "no", wins) +
              per};
}

Verdict gptq_vs_rtn()
{
  Rng rng(9009);
  int wins = 0;
  for (int t = 0; t < 50; ++t)
  {
    const LayerSnapshot l = random_layer(16, 64, 128, rng);
    const auto g = gptq_quantize(l, compute_hessian(l.x, 0.01), 8);
    const DenseMatrix rtn = rtn_quantize(l.weight, *g.quant);
    wins += layer_error(l.weight, g.weight, l.x) <= layer_error(l.weight, rtn, l.x) ? 1 : 0;
  }
  int composed = 0;
  for (int t = 0; t < 10; ++t)
  {
    const LayerSnapshot l = random_layer(16, 64, 128, rng);
    const auto ws = compute_hessian(l.x, 0.01);
    const auto p = obc_prune(l, ws, cfg(SolverKind::OBC, 0.75, 4));
    const auto q = gptq_quantize({"0", p.weight, l.x, p.mask}, ws, 8, &p.mask);
    composed += (q.mask.block_structured(4) && q.mask == p.mask && q.mask.violations(q.weight) == 0 &&
                 q.quant->violations(q.weight) == 0)
                    ? 1
                    : 0;
  }
  return {wins >= 45 && composed == 10,
          fmt("GPTQ <= RTN on %d/50 layers; block4+8-bit masks and grid exact on %d/10", wins, composed)};
}

Verdict ziplm_oracle()
{
  Rng rng(10010);
  int match = 0;
  for (int t = 0; t < 20; ++t)
  {
    const LayerSnapshot l = random_layer(4, 6, 24, rng);
    const auto r = ziplm_structured(l, compute_hessian(l.x, 0.01), 5);
    const auto xm = oracle::to_mat(l.x);
    const double damp = oracle::damping_value(xm, 0.01);
    const oracle::Mat wm = oracle::to_mat(l.weight);
    std::size_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < 6; ++p)
    {
      std::vector<bool> keep(6, true);
      keep[p] = false;
      double e = 0.0;
      for (const auto &w0 : wm)
        e += oracle::damped_row_error(w0, oracle::ridge_refit(w0, xm, keep, damp), xm, damp);
      if (e < best_err)
      {
        best_err = e;
        best = p;
      }
    }
    match += (r.kept_channels.size() == 5 &&
              std::find(r.kept_channels.begin(), r.kept_channels.end(), best) == r.kept_channels.end())
                 ? 1
                 : 0;
  }
  return {match == 20, fmt("removed channel matches exhaustive refit on %d/20 layers", match)};
}

Verdict format_and_determinism()
{
  const fs::path dir = fs::temp_directory_path() / "taco_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // awkward float values must survive exactly
  Rng rng(11011);
  TensorMap tensors;
  std::vector<float> special{0.0f, -0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(),
                             -std::numeric_limits<float>::infinity(), std::numeric_limits<float>::quiet_NaN(),
                             1.0f / 3.0f};
  tensors["special"] = Tensor::vector(special);
  tensors["layer/0/weight"] = Tensor(oracle::random_matrix(7, 5, rng));
  tensors["empty"] = Tensor::vector({});
  const Metadata meta{{"note", "snowman \xE2\x98\x83"}, {"k", "v"}};
  write_container(dir / "a.taco", tensors, meta);
  const TensorContainer back = read_container(dir / "a.taco");
  bool exact = back.metadata.at("note") == meta.at("note") && back.tensors.size() == tensors.size();
  for (const auto &[name, t] : tensors)
  {
    const Tensor &u = back.tensors.at(name);
    exact = exact && u.shape == t.shape && u.values.size() == t.values.size() &&
            (t.values.empty() || std::memcmp(u.values.data(), t.values.data(), t.values.size() * sizeof(float)) == 0);
  }
  write_container(dir / "b.taco", back.tensors, back.metadata);
  exact = exact && slurp(dir / "a.taco") == slurp(dir / "b.taco");

  SynthSpec s;
  s.classes = 8;
  s.groups = 2;
  s.dim = 16;
  s.train_per_class = 60;
  s.test_per_class = 30;
  s.seed = 5;
  const DatasetSplits data = make_synthetic(s);
  const RefNetModel m = train_toy_generalist(data.train, 5, {16, 16});
  save_model(dir / "model.taco", m);
  save_dataset(dir / "data.taco", data);
  bool same = true;
  for (TuneKind tune : {TuneKind::None, TuneKind::Taco})
  {
    TacoJob job;
    job.model_path = dir / "model.taco";
    job.data_path = dir / "data.taco";
    job.task = {"t", {1, 2, 3}};
    job.config.sparsity = 0.7;
    job.tuning = tune;
    job.seed = 13;
    job.workers = 3;
    job.output_dir = dir / "run1";
    run_taco(job);
    job.output_dir = dir / "run2";
    run_taco(job);
    for (const char *f : {"report.csv", "report.json", "model.taco", "compressed.taco"})
      same = same && slurp(dir / "run1" / f) == slurp(dir / "run2" / f) && !slurp(dir / "run1" / f).empty();
    fs::remove_all(dir / "run1");
    fs::remove_all(dir / "run2");
  }
  return {exact && same, fmt("container round trip bit-exact: %s; rerun reports byte-identical: %s",
                             exact ? "yes" : "no", same ? "yes" : "no")};
}

} // namespace

int main(int argc, char **argv)
{
  // --only N runs a single criterion (1-based)
  std::size_t only = 0;
  if (argc == 3 && std::string(argv[1]) == "--only")
    only = std::strtoul(argv[2], nullptr, 10);
  else if (argc != 1)
  {
    std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
    return 2;
  }
  const std::vector<std::pair<const char *, std::function<Verdict()>>> criteria{
      {"OBC greedy step vs exhaustive refit", obc_first_removal},
      {"solver ordering OBC <= FastOBC <= AdaPrune <= Magnitude", solver_ordering},
      {"diagonal Hessian mask degeneracy", diagonal_degeneracy},
      {"task-aware beats generic calibration on the subtask", taco_beats_ptc},
      {"accuracy drop grows with subtask class count", complexity_monotonicity},
      {"self-distillation tuner contract", tuner_contract},
      {"gradients vs central finite differences", gradient_check},
      {"gradual rounds, nested masks, gradual beats single-step", gradual_rounds},
      {"GPTQ vs round-to-nearest and block4+8-bit composition", gptq_vs_rtn},
      {"structured channel removal vs exhaustive refit", ziplm_oracle},
      {"container round trip and rerun determinism", format_and_determinism},
  };
  if (only > criteria.size())
  {
    std::fprintf(stderr, "criterion %zu out of range 1-%zu\n", only, criteria.size());
    return 2;
  }
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i)
  {
    if (only != 0 && i + 1 != only)
      continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try
    {
      v = criteria[i].second();
    }
    catch (const std::exception &e)
    {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s [%zu] %s: %s (%.1fs)\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str(),
                secs);
    std::fflush(stdout);
    failed += v.pass ? 0 : 1;
  }
  if (only == 0)
    std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed;
}
