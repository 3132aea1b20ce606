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

#ifndef TACO_CALIB_HPP
#define TACO_CALIB_HPP

#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/matrix.hpp"
#include "taco/random.hpp"
#include "taco/refnet.hpp"
#include "taco/tensor_store.hpp"

#include <numeric>
#include <string>
#include <vector>

namespace taco
{

/// Few-shot calibration sample. Labels are positions within the task that
/// drew it.
struct CalibrationSet
{
  DenseMatrix inputs;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> source_indices;
  std::size_t per_class = 0;
  std::uint64_t seed = 0;
  std::string provenance;

  std::size_t size() const noexcept { return labels.size(); }
};

namespace detail
{

inline std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset &data)
{
  std::vector<std::vector<std::size_t>> by(data.class_count);
  for (std::size_t i = 0; i < data.size(); ++i)
    by[data.labels[i]].push_back(i);
  return by;
}

inline CalibrationSet assemble(const LabeledDataset &data, const std::vector<std::size_t> &picked,
                               const TaskSpec &task, std::size_t k, std::uint64_t seed)
{
  CalibrationSet c;
  c.inputs = data.select(picked).inputs;
  for (std::size_t i : picked)
    c.labels.push_back(task.local_index(data.labels[i]));
  c.source_indices = picked;
  c.per_class = k;
  c.seed = seed;
  return c;
}

} // namespace detail

/// k samples per task class (all of them when fewer exist), drawn without
/// replacement. Classes are visited in task order with one seeded stream.
inline CalibrationSet sample_calibration(const LabeledDataset &data, const TaskSpec &task, std::size_t k,
                                         std::uint64_t seed)
{
  data.validate();
  task.validate(data.class_count);
  if (k == 0)
    throw ConfigError("calibration: samples per class must be positive");
  auto by = detail::indices_by_class(data);
  Rng rng(seed);
  std::vector<std::size_t> picked;
  for (std::size_t c : task.class_ids)
  {
    auto &pool = by[c];
    if (pool.empty())
      throw ConfigError("calibration: task class " + std::to_string(c) + " has no samples in the dataset");
    rng.shuffle(std::span<std::size_t>(pool));
    picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(k, pool.size())));
  }
  return detail::assemble(data, picked, task, k, seed);
}

/// Class-stratified sample of exactly `total` samples over every class of the
/// dataset: each class gets total / C, and a seeded choice of classes gets one
/// extra. Used for generic (task-agnostic) calibration with a matched budget.
inline CalibrationSet sample_calibration_budget(const LabeledDataset &data, std::size_t total, std::uint64_t seed)
{
  data.validate();
  const TaskSpec all = TaskSpec::all_classes(data.class_count);
  auto by = detail::indices_by_class(data);
  Rng rng(seed);
  std::vector<std::size_t> quota(data.class_count, total / data.class_count);
  std::vector<std::size_t> order(data.class_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t i = 0; i < total % data.class_count; ++i)
    ++quota[order[i]];
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < data.class_count; ++c)
  {
    auto &pool = by[c];
    if (pool.size() < quota[c])
      throw ConfigError("calibration: class " + std::to_string(c) + " has too few samples for the budget");
    rng.shuffle(std::span<std::size_t>(pool));
    picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  return detail::assemble(data, picked, all, total / data.class_count, seed);
}

/// Inputs seen by one parametric layer: d_col x columns.
struct ActivationBatch
{
  std::string layer_id;
  std::size_t layer_index = 0;
  DenseMatrix x;
};

/// im2col for a conv1d layer: one column per (sample, position), rows ordered
/// channel-major then kernel tap, with zero padding.
inline MatrixD unfold_conv_input(const Layer &l, const MatrixD &in)
{
  const std::size_t len = l.length;
  const std::size_t k = l.kernel;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  MatrixD x(l.in_channels * k, in.rows() * len);
  for (std::size_t i = 0; i < in.rows(); ++i)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < l.in_channels; ++c)
        for (std::size_t j = 0; j < k; ++j)
        {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - pad;
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(len))
            x(c * k + j, i * len + t) = in(i, c * len + static_cast<std::size_t>(src));
        }
  return x;
}

/// Converts a layer's batch input (samples x features) into its
/// operand X (d_col x columns).
inline DenseMatrix layer_operand(const Layer &l, const MatrixD &in)
{
  if (l.kind == LayerKind::Conv1d)
    return unfold_conv_input(l, in).cast<float>();
  return in.transposed().cast<float>();
}

/// Runs the calibration inputs through the model once and returns the input
/// operand of every parametric layer.
inline std::vector<ActivationBatch> capture_activations(const RefNetModel &model, const DenseMatrix &inputs)
{
  if (inputs.cols() != model.input_dim)
    throw ConfigError("capture: calibration inputs have " + std::to_string(inputs.cols()) +
                      " features, model expects " + std::to_string(model.input_dim));
  ForwardTrace trace;
  forward(model, inputs.cast<double>(), &trace);
  std::vector<ActivationBatch> out;
  for (std::size_t i : model.parametric_layers())
    out.push_back({RefNetModel::layer_id(i), i, layer_operand(model.layers[i], trace.inputs[i])});
  return out;
}

inline std::vector<ActivationBatch> capture_activations(const RefNetModel &model, const CalibrationSet &calib)
{
  return capture_activations(model, calib.inputs);
}

/// Input operand of a single layer, e.g. for re-capture after earlier layers changed.
inline ActivationBatch capture_layer(const RefNetModel &model, const DenseMatrix &inputs, std::size_t layer_index)
{
  ForwardTrace trace;
  forward(model, inputs.cast<double>(), &trace);
  return {RefNetModel::layer_id(layer_index), layer_index,
          layer_operand(model.layers.at(layer_index), trace.inputs.at(layer_index))};
}

/// "calib/inputs", "calib/labels", "act/<layer-id>".
inline TensorMap calibration_tensors(const CalibrationSet &calib, const std::vector<ActivationBatch> &acts = {})
{
  TensorMap t;
  t["calib/inputs"] = Tensor(calib.inputs);
  t["calib/labels"] = labels_tensor(calib.labels);
  for (const auto &a : acts)
    t["act/" + a.layer_id] = Tensor(a.x);
  return t;
}

} // namespace taco

#endif // TACO_CALIB_HPP
