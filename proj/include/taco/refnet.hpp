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

// Desk-scale classifier engine: MLP / conv1d / ReLU stacks ending in a
// classifier head, with hand-written backward passes. Parameters are stored
// in f32; every forward and backward computation runs in f64.

#ifndef TACO_REFNET_HPP
#define TACO_REFNET_HPP

#include "taco/constraints.hpp"
#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/matrix.hpp"
#include "taco/random.hpp"
#include "taco/tensor_store.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace taco
{

enum class LayerKind
{
  Linear,
  Conv1d,
  ReLU,
  Flatten,
  Head
};

inline std::string to_string(LayerKind k)
{
  switch (k)
  {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv1d: return "conv1d";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Head: return "head";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string &s)
{
  if (s == "linear")
    return LayerKind::Linear;
  if (s == "conv1d")
    return LayerKind::Conv1d;
  if (s == "relu")
    return LayerKind::ReLU;
  if (s == "flatten")
    return LayerKind::Flatten;
  if (s == "head")
    return LayerKind::Head;
  throw ConfigError("architecture: unknown layer type '" + s + "'");
}

/// One entry of an architecture description. `out` is the feature count of
/// linear/head layers; conv1d uses the channel fields and keeps the sequence
/// length ("same" zero padding, stride 1, odd kernel).
struct LayerSpec
{
  LayerKind kind = LayerKind::Linear;
  std::size_t out = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;

  static LayerSpec linear(std::size_t out) { return {LayerKind::Linear, out}; }
  static LayerSpec head(std::size_t classes) { return {LayerKind::Head, classes}; }
  static LayerSpec relu() { return {LayerKind::ReLU}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec conv1d(std::size_t cin, std::size_t cout, std::size_t k)
  {
    return {LayerKind::Conv1d, 0, cin, cout, k};
  }
};

struct ArchSpec
{
  std::size_t input_dim = 0;
  std::vector<LayerSpec> layers;

  nlohmann::json to_json() const
  {
    nlohmann::json j{{"input_dim", input_dim}, {"layers", nlohmann::json::array()}};
    for (const auto &l : layers)
    {
      nlohmann::json e{{"type", to_string(l.kind)}};
      if (l.kind == LayerKind::Linear || l.kind == LayerKind::Head)
        e["out"] = l.out;
      if (l.kind == LayerKind::Conv1d)
      {
        e["in_channels"] = l.in_channels;
        e["out_channels"] = l.out_channels;
        e["kernel"] = l.kernel;
      }
      j["layers"].push_back(e);
    }
    return j;
  }

  static ArchSpec from_json(const nlohmann::json &j)
  {
    try
    {
      ArchSpec a;
      a.input_dim = j.at("input_dim").get<std::size_t>();
      for (const auto &e : j.at("layers"))
      {
        LayerSpec l;
        l.kind = layer_kind_from_string(e.at("type").get<std::string>());
        l.out = e.value("out", std::size_t{0});
        l.in_channels = e.value("in_channels", std::size_t{0});
        l.out_channels = e.value("out_channels", std::size_t{0});
        l.kernel = e.value("kernel", std::size_t{0});
        a.layers.push_back(l);
      }
      return a;
    }
    catch (const nlohmann::json::exception &e)
    {
      throw ConfigError(std::string("architecture: malformed description: ") + e.what());
    }
  }

  /// Plain ReLU MLP: input -> hidden... -> head.
  static ArchSpec mlp(std::size_t input_dim, const std::vector<std::size_t> &hidden, std::size_t classes)
  {
    ArchSpec a{input_dim, {}};
    for (std::size_t h : hidden)
    {
      a.layers.push_back(LayerSpec::linear(h));
      a.layers.push_back(LayerSpec::relu());
    }
    a.layers.push_back(LayerSpec::head(classes));
    return a;
  }
};

struct Layer
{
  LayerKind kind = LayerKind::Linear;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  // conv1d geometry
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t length = 0;

  /// linear/head: out x in. conv1d: out_channels x (in_channels * kernel),
  /// column index c * kernel + j.
  DenseMatrix weight;
  std::vector<float> bias;
  std::optional<SparsityMask> mask;
  std::optional<QuantGrid> quant;

  bool has_params() const noexcept
  {
    return kind == LayerKind::Linear || kind == LayerKind::Conv1d || kind == LayerKind::Head;
  }
};

struct RefNetModel
{
  std::size_t input_dim = 0;
  std::vector<Layer> layers;

  static std::string layer_id(std::size_t index) { return std::to_string(index); }

  std::size_t class_count() const { return layers.empty() ? 0 : layers.back().out_features; }

  std::size_t head_index() const
  {
    if (layers.empty() || layers.back().kind != LayerKind::Head)
      throw ConfigError("model: final layer is not a classifier head");
    return layers.size() - 1;
  }

  std::vector<std::size_t> parametric_layers() const
  {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].has_params())
        out.push_back(i);
    return out;
  }

  ArchSpec architecture() const
  {
    ArchSpec a{input_dim, {}};
    for (const auto &l : layers)
    {
      LayerSpec s{l.kind, l.out_features};
      if (l.kind == LayerKind::Conv1d)
        s = LayerSpec::conv1d(l.in_channels, l.out_channels, l.kernel);
      a.layers.push_back(s);
    }
    return a;
  }

  std::size_t weight_count() const
  {
    std::size_t n = 0;
    for (const auto &l : layers)
      n += l.weight.size();
    return n;
  }

  std::size_t parameter_count() const
  {
    std::size_t n = 0;
    for (const auto &l : layers)
      n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Zeroes masked weights and snaps quantized layers onto their grids.
  void enforce_constraints()
  {
    for (auto &l : layers)
    {
      if (l.quant)
        l.quant->snap_all(l.weight);
      if (l.mask)
        l.mask->apply(l.weight);
    }
  }

  std::size_t mask_violations() const
  {
    std::size_t n = 0;
    for (const auto &l : layers)
      if (l.mask)
        n += l.mask->violations(l.weight);
    return n;
  }

  std::size_t grid_violations() const
  {
    std::size_t n = 0;
    for (const auto &l : layers)
      if (l.quant)
        n += l.quant->violations(l.weight);
    return n;
  }

  /// True when layers [0, head) are bitwise equal.
  bool same_backbone(const RefNetModel &other) const
  {
    if (layers.size() != other.layers.size() || input_dim != other.input_dim)
      return false;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
      if (layers[i].weight != other.layers[i].weight || layers[i].bias != other.layers[i].bias)
        return false;
    return true;
  }
};

/// Builds a model with fan-in scaled uniform initialization: weights from
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline RefNetModel build_model(const ArchSpec &spec, std::uint64_t seed)
{
  if (spec.input_dim == 0)
    throw ConfigError("architecture: input_dim must be positive");
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::Head)
    throw ConfigError("architecture: must end with a head layer");
  RefNetModel m;
  m.input_dim = spec.input_dim;
  Rng rng(seed);
  std::size_t features = spec.input_dim;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
  {
    const LayerSpec &s = spec.layers[i];
    Layer l;
    l.kind = s.kind;
    l.in_features = features;
    switch (s.kind)
    {
      case LayerKind::Linear:
      case LayerKind::Head:
        if (s.out == 0)
          throw ConfigError("architecture: layer " + std::to_string(i) + " has zero outputs");
        if (s.kind == LayerKind::Head && i + 1 != spec.layers.size())
          throw ConfigError("architecture: head must be the final layer");
        l.out_features = s.out;
        l.weight = DenseMatrix(s.out, features);
        break;
      case LayerKind::Conv1d:
        if (s.in_channels == 0 || s.out_channels == 0 || s.kernel % 2 == 0)
          throw ConfigError("architecture: conv1d layer " + std::to_string(i) +
                            " needs positive channels and an odd kernel");
        if (features % s.in_channels != 0)
          throw ConfigError("architecture: conv1d layer " + std::to_string(i) + " expects " +
                            std::to_string(s.in_channels) + " channels but receives " + std::to_string(features) +
                            " features");
        l.in_channels = s.in_channels;
        l.out_channels = s.out_channels;
        l.kernel = s.kernel;
        l.length = features / s.in_channels;
        l.out_features = s.out_channels * l.length;
        l.weight = DenseMatrix(s.out_channels, s.in_channels * s.kernel);
        break;
      case LayerKind::ReLU:
      case LayerKind::Flatten: l.out_features = features; break;
    }
    if (l.has_params())
    {
      const double fan_in = static_cast<double>(l.weight.cols());
      const double wb = std::sqrt(6.0 / fan_in);
      const double bb = 1.0 / std::sqrt(fan_in);
      for (float &w : l.weight.values())
        w = static_cast<float>(rng.uniform(-wb, wb));
      l.bias.resize(l.weight.rows());
      for (float &b : l.bias)
        b = static_cast<float>(rng.uniform(-bb, bb));
    }
    features = l.out_features;
    m.layers.push_back(std::move(l));
  }
  return m;
}

/// Replaces the classifier head with a freshly initialized one over `classes` outputs.
inline RefNetModel replace_head(const RefNetModel &model, std::size_t classes, std::uint64_t seed)
{
  RefNetModel out = model;
  Layer &h = out.layers.at(out.head_index());
  ArchSpec tmp{h.in_features, {LayerSpec::head(classes)}};
  h = build_model(tmp, seed).layers.front();
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail
{

inline MatrixD linear_forward(const Layer &l, const MatrixD &x)
{
  const MatrixD w = l.weight.cast<double>();
  MatrixD y(x.rows(), l.out_features);
  for (std::size_t i = 0; i < x.rows(); ++i)
  {
    auto xi = x.row(i);
    for (std::size_t o = 0; o < l.out_features; ++o)
    {
      auto wo = w.row(o);
      double s = l.bias[o];
      for (std::size_t k = 0; k < xi.size(); ++k)
        s += wo[k] * xi[k];
      y(i, o) = s;
    }
  }
  return y;
}

inline MatrixD conv_forward(const Layer &l, const MatrixD &x)
{
  const MatrixD w = l.weight.cast<double>();
  const std::size_t len = l.length;
  const std::size_t k = l.kernel;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  MatrixD y(x.rows(), l.out_features);
  for (std::size_t i = 0; i < x.rows(); ++i)
  {
    auto xi = x.row(i);
    for (std::size_t co = 0; co < l.out_channels; ++co)
      for (std::size_t t = 0; t < len; ++t)
      {
        double s = l.bias[co];
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t j = 0; j < k; ++j)
          {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - pad;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len))
              continue;
            s += w(co, c * k + j) * xi[c * len + static_cast<std::size_t>(src)];
          }
        y(i, co * len + t) = s;
      }
  }
  return y;
}

} // namespace detail

/// Per-layer inputs recorded during a forward pass; inputs[i] feeds layer i.
struct ForwardTrace
{
  std::vector<MatrixD> inputs;
};

/// Logits for a batch (samples x input_dim).
inline MatrixD forward(const RefNetModel &model, const MatrixD &x, ForwardTrace *trace = nullptr)
{
  if (x.cols() != model.input_dim)
    throw ConfigError("forward: input has " + std::to_string(x.cols()) + " features, model expects " +
                      std::to_string(model.input_dim));
  if (trace)
    trace->inputs.clear();
  MatrixD h = x;
  for (const Layer &l : model.layers)
  {
    if (trace)
      trace->inputs.push_back(h);
    switch (l.kind)
    {
      case LayerKind::Linear:
      case LayerKind::Head: h = detail::linear_forward(l, h); break;
      case LayerKind::Conv1d: h = detail::conv_forward(l, h); break;
      case LayerKind::ReLU:
        for (double &v : h.values())
          v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Flatten: break;
    }
  }
  return h;
}

inline MatrixD forward(const RefNetModel &model, const DenseMatrix &x)
{
  return forward(model, x.cast<double>());
}

enum class LossKind
{
  CrossEntropy,
  LogitL2
};

/// Supervision for one batch: labels for cross-entropy, teacher logits for logit-L2.
struct BatchTargets
{
  std::vector<std::size_t> labels;
  MatrixD logits;

  BatchTargets select(const std::vector<std::size_t> &rows) const
  {
    BatchTargets out;
    if (!labels.empty())
      for (std::size_t r : rows)
        out.labels.push_back(labels[r]);
    if (!logits.empty())
    {
      out.logits = MatrixD(rows.size(), logits.cols());
      for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(logits.row(rows[i]).begin(), logits.row(rows[i]).end(), out.logits.row(i).begin());
    }
    return out;
  }
};

/// Batch loss; fills dz with dLoss/dlogits when non-null.
/// Cross-entropy is averaged over the batch; logit-L2 is the summed squared
/// logit distance divided by the batch size.
inline double loss_value(const MatrixD &z, LossKind kind, const BatchTargets &t, MatrixD *dz = nullptr)
{
  const std::size_t n = z.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  if (dz)
    *dz = MatrixD(z.rows(), z.cols());
  double loss = 0.0;
  if (kind == LossKind::CrossEntropy)
  {
    if (t.labels.size() != n)
      throw ConfigError("loss: cross-entropy needs one label per sample");
    for (std::size_t i = 0; i < n; ++i)
    {
      auto zi = z.row(i);
      if (t.labels[i] >= zi.size())
        throw ConfigError("loss: label " + std::to_string(t.labels[i]) + " exceeds head size");
      const double mx = *std::max_element(zi.begin(), zi.end());
      double sum = 0.0;
      for (double v : zi)
        sum += std::exp(v - mx);
      const double lse = mx + std::log(sum);
      loss += (lse - zi[t.labels[i]]) * inv_n;
      if (dz)
      {
        for (std::size_t c = 0; c < zi.size(); ++c)
          (*dz)(i, c) = std::exp(zi[c] - lse) * inv_n;
        (*dz)(i, t.labels[i]) -= inv_n;
      }
    }
  }
  else
  {
    if (t.logits.rows() != n || t.logits.cols() != z.cols())
      throw ConfigError("loss: logit-L2 target shape does not match logits");
    for (std::size_t i = 0; i < z.size(); ++i)
    {
      const double d = z.values()[i] - t.logits.values()[i];
      loss += d * d * inv_n;
      if (dz)
        dz->values()[i] = 2.0 * d * inv_n;
    }
  }
  if (!std::isfinite(loss))
    throw NumericError("loss is not finite");
  return loss;
}

/// Parameter gradients, aligned with model.layers (empty for parameter-free layers).
struct Gradients
{
  double loss = 0.0;
  MatrixD logits;
  std::vector<MatrixD> weight;
  std::vector<std::vector<double>> bias;
};

/// Backpropagates the batch loss. Gradients at masked weight positions are zeroed.
inline Gradients backward(const RefNetModel &model, const MatrixD &x, LossKind kind, const BatchTargets &targets)
{
  ForwardTrace trace;
  Gradients g;
  g.logits = forward(model, x, &trace);
  MatrixD delta;
  g.loss = loss_value(g.logits, kind, targets, &delta);
  g.weight.resize(model.layers.size());
  g.bias.resize(model.layers.size());

  for (std::size_t li = model.layers.size(); li-- > 0;)
  {
    const Layer &l = model.layers[li];
    const MatrixD &in = trace.inputs[li];
    const bool need_dx = li > 0;
    MatrixD dx;
    if (need_dx)
      dx = MatrixD(in.rows(), in.cols());
    switch (l.kind)
    {
      case LayerKind::Linear:
      case LayerKind::Head:
      {
        const MatrixD w = l.weight.cast<double>();
        MatrixD dw(l.weight.rows(), l.weight.cols());
        std::vector<double> db(l.bias.size(), 0.0);
        for (std::size_t i = 0; i < in.rows(); ++i)
        {
          auto xi = in.row(i);
          for (std::size_t o = 0; o < l.out_features; ++o)
          {
            const double d = delta(i, o);
            if (d == 0.0)
              continue;
            db[o] += d;
            auto dwo = dw.row(o);
            for (std::size_t k = 0; k < xi.size(); ++k)
              dwo[k] += d * xi[k];
            if (need_dx)
            {
              auto dxi = dx.row(i);
              auto wo = w.row(o);
              for (std::size_t k = 0; k < xi.size(); ++k)
                dxi[k] += d * wo[k];
            }
          }
        }
        g.weight[li] = std::move(dw);
        g.bias[li] = std::move(db);
        break;
      }
      case LayerKind::Conv1d:
      {
        const MatrixD w = l.weight.cast<double>();
        MatrixD dw(l.weight.rows(), l.weight.cols());
        std::vector<double> db(l.bias.size(), 0.0);
        const std::size_t len = l.length;
        const std::size_t k = l.kernel;
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
        for (std::size_t i = 0; i < in.rows(); ++i)
        {
          auto xi = in.row(i);
          for (std::size_t co = 0; co < l.out_channels; ++co)
            for (std::size_t t = 0; t < len; ++t)
            {
              const double d = delta(i, co * len + t);
              if (d == 0.0)
                continue;
              db[co] += d;
              for (std::size_t c = 0; c < l.in_channels; ++c)
                for (std::size_t j = 0; j < k; ++j)
                {
                  const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - pad;
                  if (src < 0 || src >= static_cast<std::ptrdiff_t>(len))
                    continue;
                  const std::size_t xs = c * len + static_cast<std::size_t>(src);
                  dw(co, c * k + j) += d * xi[xs];
                  if (need_dx)
                    dx(i, xs) += d * w(co, c * k + j);
                }
            }
        }
        g.weight[li] = std::move(dw);
        g.bias[li] = std::move(db);
        break;
      }
      case LayerKind::ReLU:
        if (need_dx)
          for (std::size_t i = 0; i < dx.size(); ++i)
            dx.values()[i] = in.values()[i] > 0.0 ? delta.values()[i] : 0.0;
        break;
      case LayerKind::Flatten:
        if (need_dx)
          dx = delta;
        break;
    }
    if (l.mask)
      l.mask->apply(g.weight[li]);
    if (need_dx)
      delta = std::move(dx);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind
{
  Sgd,
  AdamW
};

struct TrainOpts
{
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  /// Stop after this many optimizer steps; 0 means no limit.
  std::size_t max_steps = 0;
  LossKind loss = LossKind::CrossEntropy;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;

  void validate() const
  {
    if (!(lr > 0.0))
      throw ConfigError("train: learning rate must be positive");
    if (batch_size == 0)
      throw ConfigError("train: batch size must be positive");
  }

  /// SGD, lr 0.1, momentum 0.9, batch 128, 10 epochs.
  static TrainOpts supervised() { return {}; }

  static TrainOpts linear_probe()
  {
    TrainOpts o;
    o.freeze_backbone = true;
    return o;
  }

  /// AdamW, lr 1e-4, batch 128, 10 passes over the calibration set, logit-L2 loss.
  static TrainOpts taco_tuner()
  {
    TrainOpts o;
    o.optimizer = OptimizerKind::AdamW;
    o.lr = 1e-4;
    o.weight_decay = 0.01;
    o.loss = LossKind::LogitL2;
    return o;
  }

  static TrainOpts qat() { return {}; }
};

struct EpochRecord
{
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

using History = std::vector<EpochRecord>;

inline nlohmann::json history_json_lines(const History &h)
{
  nlohmann::json arr = nlohmann::json::array();
  for (const auto &e : h)
    arr.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}});
  return arr;
}

/// Optimizer over f64 master copies of the model parameters. The model's f32
/// weights are republished from the masters after every step: masked entries
/// are zeroed and quantized layers are snapped to their grid, so the masters
/// act as the latent full-precision weights of a straight-through estimator.
class Trainer
{
public:
  Trainer(RefNetModel &model, TrainOpts opts) : model_(model), opts_(opts)
  {
    opts_.validate();
    const std::size_t n = model_.layers.size();
    w_.resize(n);
    b_.resize(n);
    wm_.resize(n);
    wv_.resize(n);
    bm_.resize(n);
    bv_.resize(n);
    for (std::size_t i = 0; i < n; ++i)
    {
      const Layer &l = model_.layers[i];
      if (!l.has_params())
        continue;
      w_[i].assign(l.weight.values().begin(), l.weight.values().end());
      b_[i].assign(l.bias.begin(), l.bias.end());
      wm_[i].assign(w_[i].size(), 0.0);
      wv_[i].assign(w_[i].size(), 0.0);
      bm_[i].assign(b_[i].size(), 0.0);
      bv_[i].assign(b_[i].size(), 0.0);
    }
    head_ = model_.head_index();
  }

  std::size_t steps() const noexcept { return t_; }

  /// One optimizer step on a batch; returns the gradients (loss and pre-step logits included).
  Gradients step(const MatrixD &x, const BatchTargets &targets)
  {
    Gradients g = backward(model_, x, opts_.loss, targets);
    ++t_;
    for (std::size_t i = 0; i < model_.layers.size(); ++i)
    {
      Layer &l = model_.layers[i];
      if (!l.has_params() || (opts_.freeze_backbone && i != head_))
        continue;
      update(w_[i], wm_[i], wv_[i], g.weight[i].values());
      update(b_[i], bm_[i], bv_[i], g.bias[i]);
      if (l.mask)
        for (std::size_t k = 0; k < w_[i].size(); ++k)
          if (!l.mask->keep[k])
            w_[i][k] = 0.0;
      publish(i);
    }
    return g;
  }

private:
  void update(std::vector<double> &p, std::vector<double> &m, std::vector<double> &v, const std::vector<double> &grad)
  {
    if (opts_.optimizer == OptimizerKind::Sgd)
    {
      for (std::size_t k = 0; k < p.size(); ++k)
      {
        const double gk = grad[k] + opts_.weight_decay * p[k];
        m[k] = t_ == 1 ? gk : opts_.momentum * m[k] + gk;
        p[k] -= opts_.lr * m[k];
      }
      return;
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < p.size(); ++k)
    {
      p[k] -= opts_.lr * opts_.weight_decay * p[k];
      m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
      p[k] -= opts_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }

  void publish(std::size_t i)
  {
    Layer &l = model_.layers[i];
    auto &wv = l.weight.values();
    for (std::size_t k = 0; k < wv.size(); ++k)
      wv[k] = static_cast<float>(w_[i][k]);
    for (std::size_t k = 0; k < l.bias.size(); ++k)
      l.bias[k] = static_cast<float>(b_[i][k]);
    if (l.quant)
      l.quant->snap_all(l.weight);
    if (l.mask)
      l.mask->apply(l.weight);
  }

  RefNetModel &model_;
  TrainOpts opts_;
  std::size_t head_ = 0;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> w_, b_, wm_, wv_, bm_, bv_;
};

inline std::size_t argmax_row(std::span<const double> row)
{
  // lowest index wins ties
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

namespace detail
{

inline MatrixD gather_rows(const MatrixD &x, const std::vector<std::size_t> &rows)
{
  MatrixD out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
  return out;
}

/// Shuffled minibatch loop. `after_step(trainer)` runs after each optimizer step
/// and may return false to stop early.
template <typename AfterStep>
History run_epochs(RefNetModel &model, const MatrixD &inputs, const BatchTargets &targets, const TrainOpts &opts,
                   AfterStep &&after_step)
{
  History history;
  if (opts.epochs == 0 || inputs.rows() == 0)
    return history;
  Trainer trainer(model, opts);
  Rng rng(opts.seed);
  std::vector<std::size_t> order(inputs.rows());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = i;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch)
  {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    bool stop = false;
    for (std::size_t start = 0; start < order.size() && !stop; start += opts.batch_size)
    {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const BatchTargets bt = targets.select(rows);
      const Gradients g = trainer.step(gather_rows(inputs, rows), bt);
      loss_sum += g.loss * static_cast<double>(rows.size());
      seen += rows.size();
      if (!bt.labels.empty())
        for (std::size_t i = 0; i < rows.size(); ++i)
          correct += argmax_row(g.logits.row(i)) == bt.labels[i] ? 1 : 0;
      if (!after_step(trainer) || (opts.max_steps != 0 && trainer.steps() >= opts.max_steps))
        stop = true;
    }
    const double acc = targets.labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(seen);
    history.push_back({epoch, loss_sum / static_cast<double>(seen), acc});
    if (stop)
      break;
  }
  return history;
}

} // namespace detail

struct TrainResult
{
  RefNetModel model;
  History history;
};

/// Supervised cross-entropy training. Masks (and quant grids) are preserved.
inline TrainResult train_supervised(const RefNetModel &model, const LabeledDataset &data, TrainOpts opts = {})
{
  data.validate();
  if (data.class_count != model.class_count())
    throw ConfigError("train: dataset has " + std::to_string(data.class_count) + " classes, head has " +
                      std::to_string(model.class_count()));
  opts.loss = LossKind::CrossEntropy;
  TrainResult r{model, {}};
  BatchTargets t{data.labels, {}};
  r.history = detail::run_epochs(r.model, data.inputs.cast<double>(), t, opts, [](const Trainer &) { return true; });
  return r;
}

/// Retrains only the classifier head on a frozen backbone.
inline TrainResult linear_probe(const RefNetModel &model, const LabeledDataset &data,
                                TrainOpts opts = TrainOpts::linear_probe())
{
  opts.freeze_backbone = true;
  return train_supervised(model, data, opts);
}

/// Quantization-aware finetuning: forward passes see grid-snapped weights,
/// updates accumulate in latent full-precision copies.
inline TrainResult qat_finetune(const RefNetModel &model, const LabeledDataset &data, TrainOpts opts = TrainOpts::qat())
{
  const bool any = std::any_of(model.layers.begin(), model.layers.end(), [](const Layer &l) { return l.quant.has_value(); });
  if (!any)
    throw ConfigError("qat: model has no quantized layers");
  TrainResult r = train_supervised(model, data, opts);
  r.model.enforce_constraints();
  return r;
}

/// Summed squared logit distance to the teacher, divided by sample count.
inline double logit_distance(const RefNetModel &student, const MatrixD &inputs, const MatrixD &teacher_logits)
{
  const MatrixD z = forward(student, inputs);
  return loss_value(z, LossKind::LogitL2, BatchTargets{{}, teacher_logits});
}

struct TuneResult
{
  RefNetModel model;
  History history;
  double initial_objective = 0.0;
  double best_objective = 0.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
};

/// Self-distillation tuning of a sparse student toward its dense teacher on
/// the calibration inputs, with pruned weights held at zero. Returns the
/// iterate with the lowest full-calibration-set objective (the initial model
/// included); the teacher is never modified.
inline TuneResult taco_tune(const RefNetModel &sparse, const RefNetModel &dense, const DenseMatrix &calib_inputs,
                            TrainOpts opts = TrainOpts::taco_tuner())
{
  if (sparse.architecture().to_json() != dense.architecture().to_json())
    throw ConfigError("taco_tune: sparse and dense architectures differ");
  if (sparse.mask_violations() != 0)
    throw ConfigError("taco_tune: sparse model violates its masks");
  opts.loss = LossKind::LogitL2;
  const MatrixD x = calib_inputs.cast<double>();
  const MatrixD teacher = forward(dense, x);

  TuneResult r;
  r.initial_objective = logit_distance(sparse, x, teacher);
  r.best_objective = r.initial_objective;
  r.model = sparse;
  RefNetModel work = sparse;
  r.history = detail::run_epochs(work, x, BatchTargets{{}, teacher}, opts, [&](const Trainer &tr) {
    const double j = logit_distance(work, x, teacher);
    if (!std::isfinite(j))
      throw NumericError("taco_tune: objective diverged");
    if (j < r.best_objective)
    {
      r.best_objective = j;
      r.best_step = tr.steps();
      r.model = work;
    }
    r.steps = tr.steps();
    return true;
  });
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<std::size_t> predict(const RefNetModel &model, const DenseMatrix &inputs)
{
  const MatrixD z = forward(model, inputs);
  std::vector<std::size_t> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i)
    out[i] = argmax_row(z.row(i));
  return out;
}

/// Keeps only the head rows of the task's classes, in task order.
inline RefNetModel restrict_head(const RefNetModel &model, const TaskSpec &task)
{
  const std::size_t h = model.head_index();
  task.validate(model.class_count());
  RefNetModel out = model;
  Layer &head = out.layers[h];
  const Layer &src = model.layers[h];
  head.out_features = task.size();
  head.weight = DenseMatrix(task.size(), src.weight.cols());
  head.bias.assign(task.size(), 0.0f);
  if (src.mask)
    head.mask = SparsityMask::all_kept(src.mask->layer_id, task.size(), src.weight.cols());
  if (src.quant)
    head.quant = QuantGrid{src.quant->bits, {}, {}, {}};
  for (std::size_t r = 0; r < task.size(); ++r)
  {
    const std::size_t c = task.class_ids[r];
    std::copy(src.weight.row(c).begin(), src.weight.row(c).end(), head.weight.row(r).begin());
    head.bias[r] = src.bias[c];
    if (src.mask)
      for (std::size_t k = 0; k < src.weight.cols(); ++k)
        head.mask->set(r, k, src.mask->kept(c, k));
    if (src.quant)
    {
      head.quant->scale.push_back(src.quant->scale[c]);
      head.quant->zero.push_back(src.quant->zero[c]);
      head.quant->degenerate.push_back(src.quant->degenerate[c]);
    }
  }
  return out;
}

/// Top-1 accuracy. With a task, evaluates on the task's samples using the
/// head restricted to the task (restricting a generalist head as needed).
inline double evaluate(const RefNetModel &model, const LabeledDataset &data, const std::optional<TaskSpec> &task = {})
{
  data.validate();
  LabeledDataset eval = task ? data.restrict_to(*task) : data;
  if (eval.size() == 0)
    throw ConfigError("evaluate: empty evaluation set");
  const RefNetModel *m = &model;
  RefNetModel restricted;
  if (task && model.class_count() != task->size())
  {
    restricted = restrict_head(model, *task);
    m = &restricted;
  }
  if (m->class_count() != eval.class_count)
    throw ConfigError("evaluate: head has " + std::to_string(m->class_count()) + " outputs for " +
                      std::to_string(eval.class_count) + " classes");
  const auto pred = predict(*m, eval.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    correct += pred[i] == eval.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

// ---------------------------------------------------------------------------
// Serialization: "model/<i>/weight", ".../bias", ".../mask", ".../qscale",
// ".../qzero"; the architecture JSON lives in metadata["architecture"].

inline TensorMap model_tensors(const RefNetModel &model)
{
  TensorMap t;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    const Layer &l = model.layers[i];
    if (!l.has_params())
      continue;
    const std::string p = "model/" + RefNetModel::layer_id(i);
    t[p + "/weight"] = Tensor(l.weight);
    t[p + "/bias"] = Tensor::vector(l.bias);
    if (l.mask)
      t[p + "/mask"] = l.mask->to_tensor();
    if (l.quant)
    {
      t[p + "/qscale"] = Tensor::vector(l.quant->scale);
      t[p + "/qzero"] = Tensor::vector(l.quant->zero);
    }
  }
  return t;
}

inline void save_model(const std::filesystem::path &path, const RefNetModel &model, Metadata extra = {})
{
  extra["architecture"] = model.architecture().to_json().dump();
  write_container(path, model_tensors(model), extra);
}

inline RefNetModel model_from_container(const TensorContainer &c)
{
  auto it = c.metadata.find("architecture");
  if (it == c.metadata.end())
    throw FormatError("model: container has no architecture metadata");
  nlohmann::json arch;
  try
  {
    arch = nlohmann::json::parse(it->second);
  }
  catch (const nlohmann::json::exception &e)
  {
    throw FormatError(std::string("model: malformed architecture JSON: ") + e.what());
  }
  RefNetModel m = build_model(ArchSpec::from_json(arch), 0);
  for (std::size_t i = 0; i < m.layers.size(); ++i)
  {
    Layer &l = m.layers[i];
    if (!l.has_params())
      continue;
    const std::string p = "model/" + RefNetModel::layer_id(i);
    const DenseMatrix w = require_tensor(c, p + "/weight").matrix();
    if (w.rows() != l.weight.rows() || w.cols() != l.weight.cols())
      throw FormatError("model: weight " + p + " shape does not match architecture");
    l.weight = w;
    const Tensor &b = require_tensor(c, p + "/bias");
    if (b.values.size() != l.bias.size())
      throw FormatError("model: bias " + p + " size does not match architecture");
    l.bias = b.values;
    if (auto mk = c.tensors.find(p + "/mask"); mk != c.tensors.end())
      l.mask = SparsityMask::from_tensor(RefNetModel::layer_id(i), mk->second);
    if (auto qs = c.tensors.find(p + "/qscale"); qs != c.tensors.end())
    {
      QuantGrid g;
      g.scale = qs->second.values;
      g.zero = require_tensor(c, p + "/qzero").values;
      g.degenerate.assign(g.scale.size(), 0);
      l.quant = std::move(g);
    }
  }
  return m;
}

inline RefNetModel load_model(const std::filesystem::path &path)
{
  return model_from_container(read_container(path));
}

} // namespace taco

#endif // TACO_REFNET_HPP
