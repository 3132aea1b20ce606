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

#include "oracles.hpp"
#include "taco/refnet.hpp"
#include "taco/solvers.hpp"
#include "taco/synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace
{

using namespace taco;

LabeledDataset random_inputs(std::size_t n, std::size_t dim, std::size_t classes, Rng &rng)
{
  LabeledDataset d{oracle::random_matrix(n, dim, rng), {}, classes};
  for (std::size_t i = 0; i < n; ++i)
    d.labels.push_back(i % classes);
  return d;
}

/// Two well separated clusters along the first axis.
LabeledDataset separable(std::size_t n, Rng &rng)
{
  LabeledDataset d{DenseMatrix(n, 4), {}, 2};
  for (std::size_t i = 0; i < n; ++i)
  {
    const std::size_t y = i % 2;
    d.inputs(i, 0) = static_cast<float>((y ? 2.0 : -2.0) + 0.3 * rng.normal());
    for (std::size_t k = 1; k < 4; ++k)
      d.inputs(i, k) = static_cast<float>(rng.normal());
    d.labels.push_back(y);
  }
  return d;
}

SynthSpec tiny_synth(std::uint64_t seed)
{
  SynthSpec s;
  s.classes = 4;
  s.groups = 2;
  s.dim = 16;
  s.train_per_class = 100;
  s.test_per_class = 100;
  s.seed = seed;
  return s;
}

bool same_params(const RefNetModel &a, const RefNetModel &b)
{
  if (a.layers.size() != b.layers.size())
    return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!(a.layers[i].weight == b.layers[i].weight) || a.layers[i].bias != b.layers[i].bias)
      return false;
  return true;
}

void zero_biases(RefNetModel &m)
{
  for (auto &l : m.layers)
    std::fill(l.bias.begin(), l.bias.end(), 0.0f);
}

/// Prunes every parametric layer by per-row magnitude.
void magnitude_sparsify(RefNetModel &m, double s)
{
  for (std::size_t i : m.parametric_layers())
  {
    Layer &l = m.layers[i];
    CompressionConfig c;
    c.sparsity = s;
    const auto r = magnitude_prune({RefNetModel::layer_id(i), l.weight, DenseMatrix(l.weight.cols(), 1), std::nullopt}, c);
    l.weight = r.weight;
    l.mask = r.mask;
  }
}

// ---------------------------------------------------------------------------
// Construction

TEST(Build, SingleLayerShapes)
{
  const RefNetModel m = build_model(ArchSpec{8, {LayerSpec::head(4)}}, 0);
  ASSERT_EQ(m.layers.size(), 1u);
  EXPECT_EQ(m.layers[0].weight.rows(), 4u);
  EXPECT_EQ(m.layers[0].weight.cols(), 8u);
  EXPECT_EQ(m.layers[0].bias.size(), 4u);
  EXPECT_EQ(m.parameter_count(), 36u);
}

TEST(Build, DeterministicFromSeed)
{
  const ArchSpec spec = ArchSpec::mlp(10, {12, 6}, 3);
  EXPECT_TRUE(same_params(build_model(spec, 5), build_model(spec, 5)));
  EXPECT_FALSE(same_params(build_model(spec, 5), build_model(spec, 6)));
}

TEST(Build, ConvShapesPropagate)
{
  // 2 channels x length 5 -> 3 channels x length 5 -> head
  const RefNetModel m =
      build_model(ArchSpec{10, {LayerSpec::conv1d(2, 3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::head(4)}}, 1);
  EXPECT_EQ(m.layers[0].weight.rows(), 3u);
  EXPECT_EQ(m.layers[0].weight.cols(), 6u);
  EXPECT_EQ(m.layers[3].weight.cols(), 15u);
  const MatrixD z = forward(m, MatrixD(7, 10));
  EXPECT_EQ(z.rows(), 7u);
  EXPECT_EQ(z.cols(), 4u);
}

TEST(Build, RejectsNonConformingSpecs)
{
  EXPECT_THROW(build_model(ArchSpec{10, {LayerSpec::conv1d(2, 3, 2), LayerSpec::head(2)}}, 0), ConfigError);
  EXPECT_THROW(build_model(ArchSpec{10, {LayerSpec::conv1d(3, 3, 3), LayerSpec::head(2)}}, 0), ConfigError);
  EXPECT_THROW(build_model(ArchSpec{10, {LayerSpec::head(2), LayerSpec::relu()}}, 0), ConfigError);
  EXPECT_THROW(build_model(ArchSpec{10, {LayerSpec::linear(4)}}, 0), ConfigError);
  EXPECT_THROW(build_model(ArchSpec{0, {LayerSpec::head(2)}}, 0), ConfigError);
}

TEST(Build, ArchitectureJsonRoundTrip)
{
  const ArchSpec spec{10, {LayerSpec::conv1d(2, 3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::linear(7),
                           LayerSpec::relu(), LayerSpec::head(4)}};
  EXPECT_EQ(ArchSpec::from_json(spec.to_json()).to_json(), spec.to_json());
  EXPECT_EQ(build_model(spec, 0).architecture().to_json(), spec.to_json());
}

// ---------------------------------------------------------------------------
// Forward

TEST(Forward, ZeroInputThroughBiasFreeMlpGivesZeroLogits)
{
  RefNetModel m = build_model(ArchSpec::mlp(5, {7, 6}, 3), 2);
  zero_biases(m);
  const MatrixD z = forward(m, MatrixD(4, 5));
  for (double v : z.values())
    EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityLayerPassesInputsThrough)
{
  RefNetModel m = build_model(ArchSpec{3, {LayerSpec::head(3)}}, 0);
  m.layers[0].weight = DenseMatrix::identity(3);
  zero_biases(m);
  Rng rng(1);
  const DenseMatrix in = oracle::random_matrix(5, 3, rng);
  EXPECT_EQ(forward(m, in), in.cast<double>());
}

TEST(Forward, MatchesNaivePerNeuronLoop)
{
  const RefNetModel m = build_model(ArchSpec::mlp(9, {11, 7}, 4), 3);
  Rng rng(2);
  const DenseMatrix in = oracle::random_matrix(6, 9, rng);
  const MatrixD z = forward(m, in);
  for (std::size_t s = 0; s < 6; ++s)
  {
    std::vector<double> h(in.row(s).begin(), in.row(s).end());
    for (std::size_t li = 0; li < m.layers.size(); ++li)
    {
      const Layer &l = m.layers[li];
      if (l.kind == LayerKind::ReLU)
      {
        for (double &v : h)
          v = std::max(0.0, v);
        continue;
      }
      std::vector<double> next(l.weight.rows());
      for (std::size_t o = 0; o < next.size(); ++o)
      {
        double acc = l.bias[o];
        for (std::size_t k = 0; k < h.size(); ++k)
          acc += static_cast<double>(l.weight(o, k)) * h[k];
        next[o] = acc;
      }
      h = std::move(next);
    }
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_LT(std::abs(z(s, c) - h[c]), 1e-6);
  }
}

TEST(Forward, InputWidthMismatch)
{
  const RefNetModel m = build_model(ArchSpec::mlp(9, {4}, 2), 3);
  EXPECT_THROW(forward(m, MatrixD(2, 8)), ConfigError);
}

// ---------------------------------------------------------------------------
// Losses and gradients

TEST(Loss, CrossEntropyOfUniformLogitsIsLogK)
{
  const MatrixD z(2, 4);
  EXPECT_NEAR(loss_value(z, LossKind::CrossEntropy, {{0, 3}, {}}), std::log(4.0), 1e-12);
}

TEST(Loss, LogitL2IsSummedSquareOverBatch)
{
  const MatrixD z(2, 2, {1, 2, 3, 4});
  const MatrixD t(2, 2, {0, 2, 3, 2});
  EXPECT_DOUBLE_EQ(loss_value(z, LossKind::LogitL2, {{}, t}), (1.0 + 4.0) / 2.0);
}

TEST(Backward, FullyMaskedLayerHasZeroGradient)
{
  RefNetModel m = build_model(ArchSpec::mlp(5, {6}, 3), 4);
  m.layers[0].mask = SparsityMask::all_kept("0", 6, 5);
  std::fill(m.layers[0].mask->keep.begin(), m.layers[0].mask->keep.end(), 0);
  m.enforce_constraints();
  Rng rng(5);
  const auto d = random_inputs(8, 5, 3, rng);
  const Gradients g = backward(m, d.inputs.cast<double>(), LossKind::CrossEntropy, {d.labels, {}});
  for (double v : g.weight[0].values())
    EXPECT_EQ(v, 0.0);
}

/// Central differences on every parameter against backward().
void check_gradients(const ArchSpec &spec, std::uint64_t seed, LossKind kind)
{
  RefNetModel m = build_model(spec, seed);
  Rng rng(seed + 100);
  const std::size_t n = 5;
  const DenseMatrix in = oracle::random_matrix(n, spec.input_dim, rng);
  BatchTargets t;
  if (kind == LossKind::CrossEntropy)
    for (std::size_t i = 0; i < n; ++i)
      t.labels.push_back(rng.index(m.class_count()));
  else
    t.logits = oracle::random_matrix(n, m.class_count(), rng).cast<double>();
  const MatrixD x = in.cast<double>();
  const Gradients g = backward(m, x, kind, t);
  auto loss = [&] { return loss_value(forward(m, x), kind, t); };
  const double eps = 1e-3;
  auto check = [&](float &p, double analytic, const std::string &what) {
    const float saved = p;
    p = static_cast<float>(saved + eps);
    const double up = static_cast<double>(p);
    const double lp = loss();
    p = static_cast<float>(saved - eps);
    const double down = static_cast<double>(p);
    const double lm = loss();
    p = saved;
    const double fd = (lp - lm) / (up - down);
    EXPECT_LE(std::abs(fd - analytic), 1e-2 * std::max(std::abs(fd), std::abs(analytic)) + 1e-6)
        << what << " fd=" << fd << " analytic=" << analytic;
  };
  for (std::size_t li : m.parametric_layers())
  {
    Layer &l = m.layers[li];
    for (std::size_t k = 0; k < l.weight.size(); ++k)
      check(l.weight.values()[k], g.weight[li].values()[k], "w" + std::to_string(li) + "[" + std::to_string(k) + "]");
    for (std::size_t k = 0; k < l.bias.size(); ++k)
      check(l.bias[k], g.bias[li][k], "b" + std::to_string(li) + "[" + std::to_string(k) + "]");
  }
}

TEST(Backward, SixParameterModelMatchesFiniteDifferences)
{
  const ArchSpec spec{2, {LayerSpec::head(2)}};
  EXPECT_EQ(build_model(spec, 0).parameter_count(), 6u);
  for (LossKind k : {LossKind::CrossEntropy, LossKind::LogitL2})
    check_gradients(spec, 1, k);
}

TEST(Backward, MlpAndConvMatchFiniteDifferences)
{
  const ArchSpec mlp = ArchSpec::mlp(6, {8, 5}, 3);
  const ArchSpec conv{12, {LayerSpec::conv1d(2, 3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::head(3)}};
  for (std::uint64_t seed : {1u, 2u, 3u})
    for (LossKind k : {LossKind::CrossEntropy, LossKind::LogitL2})
    {
      check_gradients(mlp, seed, k);
      check_gradients(conv, seed, k);
    }
}

TEST(Backward, LogitL2AtTeacherHasZeroGradient)
{
  const RefNetModel m = build_model(ArchSpec::mlp(6, {8}, 3), 9);
  Rng rng(10);
  const MatrixD x = oracle::random_matrix(7, 6, rng).cast<double>();
  const Gradients g = backward(m, x, LossKind::LogitL2, {{}, forward(m, x)});
  EXPECT_EQ(g.loss, 0.0);
  for (std::size_t li : m.parametric_layers())
  {
    for (double v : g.weight[li].values())
      EXPECT_EQ(v, 0.0);
    for (double v : g.bias[li])
      EXPECT_EQ(v, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, ZeroEpochsIsANoOp)
{
  const RefNetModel m = build_model(ArchSpec::mlp(4, {6}, 2), 1);
  Rng rng(2);
  TrainOpts o;
  o.epochs = 0;
  const auto r = train_supervised(m, separable(20, rng), o);
  EXPECT_TRUE(same_params(r.model, m));
  EXPECT_TRUE(r.history.empty());
}

TEST(Train, SeparableToySetReachesHighAccuracy)
{
  Rng rng(3);
  const auto d = separable(200, rng);
  TrainOpts o;
  o.epochs = 50;
  o.batch_size = 32;
  o.lr = 0.05;
  const auto r = train_supervised(build_model(ArchSpec::mlp(4, {8}, 2), 4), d, o);
  EXPECT_GE(evaluate(r.model, d), 0.99);
  EXPECT_EQ(r.history.size(), 50u);
}

TEST(Train, MasksSurviveTraining)
{
  RefNetModel m = build_model(ArchSpec::mlp(4, {8}, 2), 5);
  magnitude_sparsify(m, 0.5);
  Rng rng(6);
  TrainOpts o;
  o.epochs = 5;
  o.batch_size = 16;
  const auto r = train_supervised(m, separable(64, rng), o);
  EXPECT_EQ(r.model.mask_violations(), 0u);
  EXPECT_FALSE(same_params(r.model, m));
}

TEST(Train, DeterministicTrajectory)
{
  Rng a(7), b(7);
  TrainOpts o;
  o.epochs = 3;
  o.batch_size = 16;
  o.seed = 3;
  const auto ra = train_supervised(build_model(ArchSpec::mlp(4, {8}, 2), 8), separable(64, a), o);
  const auto rb = train_supervised(build_model(ArchSpec::mlp(4, {8}, 2), 8), separable(64, b), o);
  EXPECT_TRUE(same_params(ra.model, rb.model));
}

TEST(Train, DivergenceIsANumericError)
{
  Rng rng(9);
  TrainOpts o;
  o.epochs = 20;
  o.lr = 1e12;
  EXPECT_THROW(train_supervised(build_model(ArchSpec::mlp(4, {8}, 2), 1), separable(64, rng), o), NumericError);
}

TEST(Train, InvalidOptions)
{
  Rng rng(9);
  TrainOpts o;
  o.lr = 0.0;
  EXPECT_THROW(train_supervised(build_model(ArchSpec::mlp(4, {8}, 2), 1), separable(8, rng), o), ConfigError);
  EXPECT_THROW(train_supervised(build_model(ArchSpec::mlp(4, {8}, 3), 1), separable(8, rng)), ConfigError);
}

TEST(Train, HistoryJsonLines)
{
  const History h{{0, 1.5, 0.25}};
  EXPECT_EQ(history_json_lines(h).dump(), R"([{"accuracy":0.25,"epoch":0,"loss":1.5}])");
}

// ---------------------------------------------------------------------------
// Linear probing

TEST(Probe, BackboneIsBitwiseUnchanged)
{
  const DatasetSplits d = make_synthetic(tiny_synth(1));
  const RefNetModel m = build_model(ArchSpec::mlp(16, {12}, 4), 2);
  const auto r = linear_probe(m, d.train);
  EXPECT_EQ(r.model.layers[0].weight, m.layers[0].weight);
  EXPECT_EQ(r.model.layers[0].bias, m.layers[0].bias);
  EXPECT_FALSE(r.model.layers[2].weight == m.layers[2].weight);
}

TEST(Probe, ZeroEpochsIsIdentity)
{
  const DatasetSplits d = make_synthetic(tiny_synth(1));
  const RefNetModel m = build_model(ArchSpec::mlp(16, {12}, 4), 2);
  TrainOpts o = TrainOpts::linear_probe();
  o.epochs = 0;
  EXPECT_TRUE(same_params(linear_probe(m, d.train, o).model, m));
}

TEST(Probe, SelfProbeStaysWithinTwoPoints)
{
  const DatasetSplits d = make_synthetic(tiny_synth(2));
  TrainOpts o;
  o.seed = 1;
  o.epochs = 60;
  const RefNetModel m = train_supervised(build_model(ArchSpec::mlp(16, {32}, 4), 3), d.train, o).model;
  const double before = evaluate(m, d.test);
  const double after = evaluate(linear_probe(m, d.train).model, d.test);
  EXPECT_GE(before, 0.8);
  EXPECT_LE(std::abs(after - before), 0.02) << before << " -> " << after;
}

// ---------------------------------------------------------------------------
// Self-distillation tuner

TEST(TacoTune, IdenticalModelsAreAFixedPoint)
{
  RefNetModel dense = build_model(ArchSpec::mlp(6, {8}, 3), 1);
  for (std::size_t i : dense.parametric_layers())
    dense.layers[i].mask = SparsityMask::all_kept(RefNetModel::layer_id(i), dense.layers[i].weight.rows(),
                                                  dense.layers[i].weight.cols());
  Rng rng(2);
  const DenseMatrix calib = oracle::random_matrix(20, 6, rng);
  const auto r = taco_tune(dense, dense, calib);
  EXPECT_EQ(r.initial_objective, 0.0);
  EXPECT_EQ(r.best_objective, 0.0);
  EXPECT_TRUE(same_params(r.model, dense));
}

TEST(TacoTune, ReducesObjectiveAndKeepsMasks)
{
  const DatasetSplits d = make_synthetic(tiny_synth(3));
  TrainOpts o;
  o.seed = 2;
  const RefNetModel dense = train_supervised(build_model(ArchSpec::mlp(16, {32}, 4), 4), d.train, o).model;
  RefNetModel sparse = dense;
  magnitude_sparsify(sparse, 0.8);
  const RefNetModel dense_copy = dense;
  const DenseMatrix calib = d.train.select({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19}).inputs;
  TrainOpts t = TrainOpts::taco_tuner();
  t.batch_size = 20;
  t.epochs = 200;
  t.max_steps = 200;
  t.lr = 1e-2;
  const auto r = taco_tune(sparse, dense, calib, t);
  EXPECT_LE(r.best_objective, 0.5 * r.initial_objective);
  EXPECT_EQ(r.model.mask_violations(), 0u);
  EXPECT_LE(r.steps, 200u);
  for (std::size_t i : sparse.parametric_layers())
    EXPECT_EQ(*r.model.layers[i].mask, *sparse.layers[i].mask);
  EXPECT_TRUE(same_params(dense, dense_copy));
}

TEST(TacoTune, BestObjectiveNeverExceedsInitial)
{
  for (std::uint64_t seed = 0; seed < 5; ++seed)
  {
    RefNetModel dense = build_model(ArchSpec::mlp(6, {8}, 3), seed);
    RefNetModel sparse = dense;
    magnitude_sparsify(sparse, 0.5);
    Rng rng(seed);
    TrainOpts t = TrainOpts::taco_tuner();
    t.lr = 0.5; // deliberately unstable
    t.epochs = 5;
    const auto r = taco_tune(sparse, dense, oracle::random_matrix(10, 6, rng), t);
    EXPECT_LE(r.best_objective, r.initial_objective);
  }
}

TEST(TacoTune, ArchitectureMismatch)
{
  const RefNetModel a = build_model(ArchSpec::mlp(6, {8}, 3), 1);
  const RefNetModel b = build_model(ArchSpec::mlp(6, {9}, 3), 1);
  EXPECT_THROW(taco_tune(a, b, DenseMatrix(4, 6)), ConfigError);
}

// ---------------------------------------------------------------------------
// Quantization-aware finetuning

RefNetModel quantize_all(RefNetModel m)
{
  for (std::size_t i : m.parametric_layers())
  {
    Layer &l = m.layers[i];
    l.quant = QuantGrid::fit(l.weight, 8);
    l.quant->snap_all(l.weight);
    if (l.mask)
      l.mask->apply(l.weight);
  }
  return m;
}

TEST(Qat, ZeroEpochsKeepsGridWeights)
{
  const DatasetSplits d = make_synthetic(tiny_synth(4));
  const RefNetModel q = quantize_all(build_model(ArchSpec::mlp(16, {12}, 4), 5));
  TrainOpts o;
  o.epochs = 0;
  const auto r = qat_finetune(q, d.train, o);
  EXPECT_TRUE(same_params(r.model, q));
  EXPECT_EQ(r.model.grid_violations(), 0u);
}

TEST(Qat, ResultIsOnGridAndMasked)
{
  const DatasetSplits d = make_synthetic(tiny_synth(4));
  RefNetModel m = build_model(ArchSpec::mlp(16, {12}, 4), 5);
  magnitude_sparsify(m, 0.5);
  const auto r = qat_finetune(quantize_all(m), d.train);
  EXPECT_EQ(r.model.grid_violations(), 0u);
  EXPECT_EQ(r.model.mask_violations(), 0u);
}

TEST(Qat, RequiresQuantizedLayers)
{
  const DatasetSplits d = make_synthetic(tiny_synth(4));
  EXPECT_THROW(qat_finetune(build_model(ArchSpec::mlp(16, {12}, 4), 5), d.train), ConfigError);
}

TEST(Qat, ImprovesOverPostQuantizationModel)
{
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
  {
    const DatasetSplits d = make_synthetic(tiny_synth(10 + seed));
    TrainOpts o;
    o.seed = seed;
    RefNetModel m = train_supervised(build_model(ArchSpec::mlp(16, {32}, 4), seed), d.train, o).model;
    magnitude_sparsify(m, 0.9);
    const RefNetModel q = quantize_all(m);
    const double before = evaluate(q, d.test);
    o.seed = seed + 1;
    const double after = evaluate(qat_finetune(q, d.train, o).model, d.test);
    wins += after > before ? 1 : 0;
  }
  EXPECT_GE(wins, 8);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, ConstantPredictorOnOneClass)
{
  RefNetModel m = build_model(ArchSpec{3, {LayerSpec::head(4)}}, 0);
  m.layers[0].weight = DenseMatrix(4, 3);
  m.layers[0].bias = {0, 0, 5, 0};
  Rng rng(1);
  const LabeledDataset d{oracle::random_matrix(10, 3, rng), std::vector<std::size_t>(10, 2), 4};
  EXPECT_EQ(evaluate(m, d), 1.0);
}

TEST(Evaluate, RandomModelIsAtChance)
{
  const RefNetModel m = build_model(ArchSpec::mlp(5, {8}, 4), 2);
  Rng rng(3);
  const std::size_t n = 4000;
  const auto d = random_inputs(n, 5, 4, rng);
  const double p = 0.25;
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  EXPECT_NEAR(evaluate(m, d), p, 3 * sigma);
}

TEST(Evaluate, EmptySetIsAnError)
{
  const RefNetModel m = build_model(ArchSpec::mlp(5, {8}, 4), 2);
  const LabeledDataset d{DenseMatrix(2, 5), {0, 1}, 4};
  EXPECT_THROW(evaluate(m, d, TaskSpec{"t", {3}}), ConfigError);
}

TEST(Evaluate, TaskModeAgreesWithMaskedFullLogits)
{
  const DatasetSplits d = make_synthetic(tiny_synth(5));
  const RefNetModel m = build_model(ArchSpec::mlp(16, {12}, 4), 6);
  const TaskSpec task{"t", {1, 3}};
  const double acc = evaluate(m, d.test, task);
  const MatrixD z = forward(m, d.test.inputs);
  std::size_t n = 0, correct = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i)
  {
    const std::size_t y = d.test.labels[i];
    if (y != 1 && y != 3)
      continue;
    ++n;
    const std::size_t pred = z(i, 3) > z(i, 1) ? 3 : 1;
    correct += pred == y ? 1 : 0;
  }
  EXPECT_DOUBLE_EQ(acc, static_cast<double>(correct) / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Serialization

TEST(ModelIo, RoundTripWithMasksAndGrids)
{
  RefNetModel m = build_model(
      ArchSpec{10, {LayerSpec::conv1d(2, 3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::head(4)}}, 3);
  magnitude_sparsify(m, 0.5);
  m = quantize_all(m);
  const auto path = std::filesystem::temp_directory_path() / "taco_refnet_model.taco";
  save_model(path, m);
  const RefNetModel back = load_model(path);
  EXPECT_TRUE(same_params(back, m));
  EXPECT_EQ(*back.layers[0].mask, *m.layers[0].mask);
  EXPECT_EQ(back.layers[3].quant->scale, m.layers[3].quant->scale);
  EXPECT_EQ(back.grid_violations(), 0u);
  const TensorContainer c = read_container(path);
  EXPECT_EQ(c.tensors.count("model/0/weight"), 1u);
  EXPECT_EQ(c.tensors.at("model/0/weight").shape, (std::vector<std::size_t>{3, 6}));
}

TEST(ModelIo, MissingArchitectureIsAFormatError)
{
  const auto path = std::filesystem::temp_directory_path() / "taco_refnet_noarch.taco";
  write_container(path, {});
  EXPECT_THROW(load_model(path), FormatError);
}

} // namespace
