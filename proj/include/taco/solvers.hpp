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

// Layer-wise compression solvers. Every solver attacks
//
//     min_{W' in C}  || W' X - W X ||_F^2
//
// for one layer's weights W (d_row x d_col) and captured inputs X (d_col x n),
// using the damped Hessian H = 2 X X^T + lambda * mean(diag(2 X X^T)) * I.
// All arithmetic is f64; results are returned as f32.

#ifndef TACO_SOLVERS_HPP
#define TACO_SOLVERS_HPP

#include "taco/constraints.hpp"
#include "taco/errors.hpp"
#include "taco/matrix.hpp"
#include "taco/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace taco
{

enum class SolverKind
{
  Magnitude,
  AdaPrune,
  OBC,
  FastOBC,
  HybridOBC,
  ZipLM,
  GPTQ
};

inline std::string to_string(SolverKind k)
{
  switch (k)
  {
    case SolverKind::Magnitude: return "magnitude";
    case SolverKind::AdaPrune: return "adaprune";
    case SolverKind::OBC: return "obc";
    case SolverKind::FastOBC: return "fastobc";
    case SolverKind::HybridOBC: return "hybrid";
    case SolverKind::ZipLM: return "ziplm";
    case SolverKind::GPTQ: return "gptq";
  }
  return "?";
}

inline SolverKind solver_from_string(const std::string &s)
{
  for (auto k : {SolverKind::Magnitude, SolverKind::AdaPrune, SolverKind::OBC, SolverKind::FastOBC,
                 SolverKind::HybridOBC, SolverKind::ZipLM, SolverKind::GPTQ})
    if (to_string(k) == s)
      return k;
  throw ConfigError("unknown solver '" + s + "' (expected magnitude|adaprune|obc|fastobc|hybrid|ziplm|gptq)");
}

enum class BudgetScope
{
  PerRow,
  PerLayer
};

struct AdaPruneOpts
{
  std::size_t steps = 100;
  double lr = 1e-3;
};

/// The compression predicate and solver choice.
struct CompressionConfig
{
  SolverKind solver = SolverKind::HybridOBC;
  double sparsity = 0.0;
  /// 1 = unstructured; b > 1 = aligned groups of b weights along the input dimension.
  std::size_t block = 1;
  /// Channels to keep per layer in structured mode; 0 derives it from sparsity.
  std::size_t structured_keep = 0;
  std::optional<unsigned> bits;
  double damping = 0.01;
  std::size_t hybrid_threshold = 1024;
  std::size_t fastobc_blocksize = 128;
  BudgetScope budget = BudgetScope::PerRow;
  std::vector<std::string> excluded_layers;
  AdaPruneOpts adaprune;

  void validate() const
  {
    if (!(sparsity >= 0.0 && sparsity < 1.0))
      throw ConfigError("config: sparsity must be in [0, 1), got " + std::to_string(sparsity));
    if (block == 0)
      throw ConfigError("config: block size must be positive");
    if (bits && *bits != 8)
      throw ConfigError("config: only 8-bit quantization is supported");
    if (!(damping > 0.0))
      throw ConfigError("config: damping must be positive");
    if (fastobc_blocksize == 0)
      throw ConfigError("config: FastOBC blocksize must be positive");
  }

  void validate_for(std::size_t d_col) const
  {
    validate();
    if (block > 1 && d_col % block != 0)
      throw ConfigError("config: block " + std::to_string(block) + " does not divide d_col " + std::to_string(d_col));
  }

  bool excludes(const std::string &layer_id) const
  {
    return std::find(excluded_layers.begin(), excluded_layers.end(), layer_id) != excluded_layers.end();
  }

  /// Pruned units (weights or groups) per row of a d_col-wide row.
  std::size_t row_budget(std::size_t d_col) const
  {
    const std::size_t units = d_col / block;
    return static_cast<std::size_t>(std::ceil(sparsity * static_cast<double>(units) - 1e-9));
  }

  std::size_t layer_budget(std::size_t d_row, std::size_t d_col) const
  {
    const std::size_t units = d_row * (d_col / block);
    return static_cast<std::size_t>(std::ceil(sparsity * static_cast<double>(units) - 1e-9));
  }
};

/// One layer's compression problem.
struct LayerSnapshot
{
  std::string layer_id;
  DenseMatrix weight;
  DenseMatrix x;
  /// Positions already pruned (e.g. by an earlier gradual round); they stay pruned.
  std::optional<SparsityMask> prior;
};

struct SolverWorkspace
{
  MatrixD hessian;
  MatrixD hessian_inv;
  double damping = 0.0;

  std::size_t dim() const noexcept { return hessian.rows(); }

  /// Workspace for an explicit symmetric positive definite H.
  static SolverWorkspace from_hessian(MatrixD h)
  {
    SolverWorkspace ws;
    ws.hessian_inv = inv_spd(h);
    ws.hessian = std::move(h);
    return ws;
  }
};

/// H = 2 X X^T + lambda * mean(diag(2 X X^T)) * I, checked for definiteness.
inline SolverWorkspace compute_hessian(const DenseMatrix &x, double lambda)
{
  if (x.rows() == 0)
    throw ConfigError("hessian: empty activation batch");
  if (lambda < 0.0)
    throw ConfigError("hessian: damping must be non-negative");
  const std::size_t d = x.rows();
  const MatrixD xd = x.cast<double>();
  MatrixD h(d, d);
  for (std::size_t i = 0; i < d; ++i)
  {
    auto xi = xd.row(i);
    for (std::size_t j = 0; j <= i; ++j)
    {
      auto xj = xd.row(j);
      double s = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c)
        s += xi[c] * xj[c];
      h(i, j) = 2.0 * s;
      h(j, i) = 2.0 * s;
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    mean_diag += h(i, i);
  mean_diag /= static_cast<double>(d);
  const double damp = lambda * mean_diag;
  for (std::size_t i = 0; i < d; ++i)
    h(i, i) += damp;
  SolverWorkspace ws = SolverWorkspace::from_hessian(std::move(h));
  ws.damping = damp;
  return ws;
}

/// || W' X - W X ||_F^2, exact in f64.
inline double layer_error(const DenseMatrix &w, const DenseMatrix &w_hat, const DenseMatrix &x)
{
  require_same_shape(w, w_hat, "layer_error");
  if (w.cols() != x.rows())
    throw ConfigError("layer_error: weight has " + std::to_string(w.cols()) + " columns, X has " +
                      std::to_string(x.rows()) + " rows");
  const MatrixD xd = x.cast<double>();
  std::vector<double> diff(w.cols());
  std::vector<double> out(x.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r)
  {
    for (std::size_t k = 0; k < w.cols(); ++k)
      diff[k] = static_cast<double>(w_hat(r, k)) - static_cast<double>(w(r, k));
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t k = 0; k < w.cols(); ++k)
    {
      if (diff[k] == 0.0)
        continue;
      auto xk = xd.row(k);
      for (std::size_t c = 0; c < out.size(); ++c)
        out[c] += diff[k] * xk[c];
    }
    for (double v : out)
      total += v * v;
  }
  return total;
}

struct SolverResult
{
  std::string layer_id;
  SolverKind solver = SolverKind::Magnitude;
  DenseMatrix weight;
  SparsityMask mask;
  std::optional<QuantGrid> quant;
  /// Structured mode: surviving input channels in original order.
  std::vector<std::size_t> kept_channels;
};

namespace detail
{

inline SparsityMask initial_mask(const LayerSnapshot &layer, std::size_t block)
{
  if (!layer.prior)
    return SparsityMask::all_kept(layer.layer_id, layer.weight.rows(), layer.weight.cols());
  const SparsityMask &p = *layer.prior;
  if (p.rows != layer.weight.rows() || p.cols != layer.weight.cols())
    throw ConfigError("layer " + layer.layer_id + ": prior mask shape does not match weight");
  if (block > 1 && !p.block_structured(block))
    throw ConfigError("layer " + layer.layer_id + ": prior mask is not block-structured");
  SparsityMask m = p;
  m.layer_id = layer.layer_id;
  return m;
}

// Unit u of row r is "alive" if its first weight is kept (masks are block-uniform).
inline bool unit_alive(const SparsityMask &m, std::size_t r, std::size_t u, std::size_t block)
{
  return m.kept(r, u * block);
}

inline void kill_unit(SparsityMask &m, std::size_t r, std::size_t u, std::size_t block)
{
  for (std::size_t j = 0; j < block; ++j)
    m.set(r, u * block + j, false);
}

inline std::size_t dead_units(const SparsityMask &m, std::size_t r, std::size_t block)
{
  std::size_t n = 0;
  for (std::size_t u = 0; u < m.cols / block; ++u)
    n += unit_alive(m, r, u, block) ? 0 : 1;
  return n;
}

/// Additional removals needed per row so that each row reaches its budget.
inline std::vector<std::size_t> per_row_new_removals(const SparsityMask &m, std::size_t budget, std::size_t block)
{
  std::vector<std::size_t> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r)
  {
    const std::size_t dead = dead_units(m, r, block);
    out[r] = budget > dead ? budget - dead : 0;
  }
  return out;
}

inline std::size_t layer_new_removals(const SparsityMask &m, std::size_t budget, std::size_t block)
{
  std::size_t dead = 0;
  for (std::size_t r = 0; r < m.rows; ++r)
    dead += dead_units(m, r, block);
  return budget > dead ? budget - dead : 0;
}

struct Candidate
{
  double score;
  std::size_t row;
  std::size_t unit;
};

// Lowest score first; ties go to the lowest (row, unit).
inline bool candidate_less(const Candidate &a, const Candidate &b)
{
  if (a.score != b.score)
    return a.score < b.score;
  if (a.row != b.row)
    return a.row < b.row;
  return a.unit < b.unit;
}

/// Prunes the `count` lowest-scoring candidates.
inline void prune_lowest(std::vector<Candidate> cands, std::size_t count, SparsityMask &mask, std::size_t block)
{
  count = std::min(count, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(count), cands.end(), candidate_less);
  for (std::size_t i = 0; i < count; ++i)
    kill_unit(mask, cands[i].row, cands[i].unit, block);
}

} // namespace detail

/// Magnitude pruning: per row, the units with the smallest |w| (block mode:
/// smallest group L2 norm) are zeroed; kept entries are unchanged.
inline SolverResult magnitude_prune(const LayerSnapshot &layer, const CompressionConfig &config)
{
  const DenseMatrix &w = layer.weight;
  config.validate_for(w.cols());
  const std::size_t b = config.block;
  const std::size_t units = w.cols() / b;
  SparsityMask mask = detail::initial_mask(layer, b);

  auto unit_score = [&](std::size_t r, std::size_t u) {
    double s = 0.0;
    for (std::size_t j = 0; j < b; ++j)
    {
      const double v = w(r, u * b + j);
      s += v * v;
    }
    return s; // squared norm orders identically to |w| / L2 norm
  };

  if (config.budget == BudgetScope::PerRow)
  {
    const auto need = detail::per_row_new_removals(mask, config.row_budget(w.cols()), b);
    for (std::size_t r = 0; r < w.rows(); ++r)
    {
      std::vector<detail::Candidate> cands;
      for (std::size_t u = 0; u < units; ++u)
        if (detail::unit_alive(mask, r, u, b))
          cands.push_back({unit_score(r, u), r, u});
      detail::prune_lowest(std::move(cands), need[r], mask, b);
    }
  }
  else
  {
    std::vector<detail::Candidate> cands;
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t u = 0; u < units; ++u)
        if (detail::unit_alive(mask, r, u, b))
          cands.push_back({unit_score(r, u), r, u});
    detail::prune_lowest(std::move(cands), detail::layer_new_removals(mask, config.layer_budget(w.rows(), w.cols()), b),
                         mask, b);
  }

  SolverResult res{layer.layer_id, SolverKind::Magnitude, w, mask, std::nullopt, {}};
  mask.apply(res.weight);
  return res;
}

/// Magnitude mask, then gradient descent on the surviving weights over the
/// calibration columns. The objective is the layer error divided by the
/// number of columns; the lowest-error iterate is returned.
inline SolverResult adaprune(const LayerSnapshot &layer, const CompressionConfig &config)
{
  SolverResult res = magnitude_prune(layer, config);
  res.solver = SolverKind::AdaPrune;
  const auto &opts = config.adaprune;
  if (opts.steps == 0)
    return res;
  if (!(opts.lr > 0.0))
    throw ConfigError("adaprune: learning rate must be positive");

  const std::size_t rows = layer.weight.rows();
  const std::size_t d = layer.weight.cols();
  const double n = static_cast<double>(std::max<std::size_t>(1, layer.x.cols()));
  // G = X X^T; error(W') = tr((W'-W) G (W'-W)^T)
  const MatrixD xd = layer.x.cast<double>();
  MatrixD g(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j)
    {
      double s = 0.0;
      for (std::size_t c = 0; c < xd.cols(); ++c)
        s += xd(i, c) * xd(j, c);
      g(i, j) = s;
      g(j, i) = s;
    }

  const MatrixD w0 = layer.weight.cast<double>();
  MatrixD w = res.weight.cast<double>();
  MatrixD delta_g(rows, d);
  auto error_and_grad = [&](const MatrixD &cur) {
    double err = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
    {
      auto dg = delta_g.row(r);
      std::fill(dg.begin(), dg.end(), 0.0);
      for (std::size_t k = 0; k < d; ++k)
      {
        const double dk = cur(r, k) - w0(r, k);
        if (dk == 0.0)
          continue;
        auto gk = g.row(k);
        for (std::size_t j = 0; j < d; ++j)
          dg[j] += dk * gk[j];
      }
      for (std::size_t k = 0; k < d; ++k)
        err += (cur(r, k) - w0(r, k)) * dg[k];
    }
    return err;
  };

  const double initial = error_and_grad(w);
  double best = initial;
  MatrixD best_w = w;
  for (std::size_t step = 0; step < opts.steps; ++step)
  {
    for (std::size_t i = 0; i < w.size(); ++i)
      if (res.mask.keep[i])
        w.values()[i] -= opts.lr * 2.0 / n * delta_g.values()[i];
    const double err = error_and_grad(w);
    if (!std::isfinite(err) || err > 10.0 * std::max(initial, 1e-300))
      throw NumericError("adaprune: layer " + layer.layer_id + " diverged (error " + std::to_string(err) +
                         " vs initial " + std::to_string(initial) + "); use a smaller learning rate");
    if (err < best)
    {
      best = err;
      best_w = w;
    }
  }
  res.weight = best_w.cast<float>();
  res.mask.apply(res.weight);
  return res;
}

namespace detail
{

/// Greedy OBS elimination state for one row: weights and the inverse Hessian
/// restricted to the surviving support.
struct ObsRow
{
  std::vector<double> w;
  MatrixD hinv;
};

/// Removes unit `u` (block width b): optimal compensation of the remaining
/// weights followed by Gaussian elimination of the unit from hinv.
/// Returns the increase of the damped layer error.
inline double obs_eliminate(ObsRow &s, std::size_t u, std::size_t b, const std::string &layer_id)
{
  const std::size_t d = s.w.size();
  const std::size_t base = u * b;
  if (b == 1)
  {
    const double hpp = s.hinv(base, base);
    if (!(hpp > 0.0))
      throw NumericError("obc: layer " + layer_id + " lost positive definiteness during downdate");
    const double wp = s.w[base];
    const double coef = wp / hpp;
    const std::vector<double> col(s.hinv.row(base).begin(), s.hinv.row(base).end());
    for (std::size_t j = 0; j < d; ++j)
      s.w[j] -= coef * col[j];
    s.w[base] = 0.0;
    for (std::size_t i = 0; i < d; ++i)
    {
      const double ci = col[i] / hpp;
      if (ci == 0.0)
        continue;
      auto hi = s.hinv.row(i);
      for (std::size_t j = 0; j < d; ++j)
        hi[j] -= ci * col[j];
    }
    for (std::size_t j = 0; j < d; ++j)
      s.hinv(base, j) = s.hinv(j, base) = 0.0;
    return 0.5 * wp * wp / hpp;
  }

  MatrixD hgg(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      hgg(i, j) = s.hinv(base + i, base + j);
  MatrixD hgg_inv;
  try
  {
    hgg_inv = inv_spd(hgg);
  }
  catch (const NumericError &)
  {
    throw NumericError("obc: layer " + layer_id + " lost positive definiteness during block downdate");
  }
  std::vector<double> wg(b), a(b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    wg[i] = s.w[base + i];
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i)
  {
    for (std::size_t j = 0; j < b; ++j)
      a[i] += hgg_inv(i, j) * wg[j];
    loss += wg[i] * a[i];
  }
  MatrixD cols(b, d); // rows of hinv for the group (hinv is symmetric)
  for (std::size_t i = 0; i < b; ++i)
    std::copy(s.hinv.row(base + i).begin(), s.hinv.row(base + i).end(), cols.row(i).begin());
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < b; ++i)
      s.w[j] -= cols(i, j) * a[i];
  for (std::size_t i = 0; i < b; ++i)
    s.w[base + i] = 0.0;
  // hinv -= cols^T hgg_inv cols
  MatrixD t(b, d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < b; ++k)
    {
      const double hik = hgg_inv(i, k);
      for (std::size_t j = 0; j < d; ++j)
        t(i, j) += hik * cols(k, j);
    }
  for (std::size_t r = 0; r < d; ++r)
  {
    auto hr = s.hinv.row(r);
    for (std::size_t i = 0; i < b; ++i)
    {
      const double c = cols(i, r);
      if (c == 0.0)
        continue;
      auto ti = t.row(i);
      for (std::size_t j = 0; j < d; ++j)
        hr[j] -= c * ti[j];
    }
  }
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j)
      s.hinv(base + i, j) = s.hinv(j, base + i) = 0.0;
  return 0.5 * loss;
}

/// OBS saliency of removing unit u: w_G^T (hinv_GG)^-1 w_G / 2.
inline double obs_score(const ObsRow &s, std::size_t u, std::size_t b)
{
  const std::size_t base = u * b;
  if (b == 1)
  {
    const double hpp = s.hinv(base, base);
    return hpp > 0.0 ? 0.5 * s.w[base] * s.w[base] / hpp : std::numeric_limits<double>::infinity();
  }
  MatrixD hgg(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      hgg(i, j) = s.hinv(base + i, base + j);
  MatrixD inv;
  try
  {
    inv = inv_spd(hgg);
  }
  catch (const NumericError &)
  {
    return std::numeric_limits<double>::infinity();
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      loss += s.w[base + i] * inv(i, j) * s.w[base + j];
  return 0.5 * loss;
}

/// Greedy OBC on one row. Prior-pruned units are eliminated first; then
/// `removals` units are removed one at a time. Records each step's loss when
/// `losses` is non-null.
inline void obc_row(std::span<float> out_w, std::span<std::uint8_t> keep, std::span<const float> w,
                    const MatrixD &hinv, std::size_t removals, std::size_t b, const std::string &layer_id,
                    std::vector<double> *losses = nullptr)
{
  const std::size_t d = w.size();
  const std::size_t units = d / b;
  ObsRow s{std::vector<double>(w.begin(), w.end()), hinv};
  std::vector<std::uint8_t> alive(units, 1);
  for (std::size_t u = 0; u < units; ++u)
    if (!keep[u * b])
    {
      alive[u] = 0;
      obs_eliminate(s, u, b, layer_id);
    }
  for (std::size_t step = 0; step < removals; ++step)
  {
    std::size_t best = units;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < units; ++u)
    {
      if (!alive[u])
        continue;
      const double sc = obs_score(s, u, b);
      if (best == units || sc < best_score)
      {
        best = u;
        best_score = sc;
      }
    }
    if (best == units)
      break;
    if (!std::isfinite(best_score))
      throw NumericError("obc: layer " + layer_id + " lost positive definiteness during downdate");
    const double loss = obs_eliminate(s, best, b, layer_id);
    if (losses)
      losses->push_back(loss);
    alive[best] = 0;
  }
  for (std::size_t u = 0; u < units; ++u)
    for (std::size_t j = 0; j < b; ++j)
      keep[u * b + j] = alive[u];
  for (std::size_t j = 0; j < d; ++j)
    out_w[j] = keep[j] ? static_cast<float>(s.w[j]) : 0.0f;
}

} // namespace detail

/// Optimal Brain Compression: per row, greedily remove the unit with the
/// smallest OBS saliency w_p^2 / [H_F^-1]_pp over the current support F and
/// update every surviving weight to compensate. O(d_row * d_col^3).
inline SolverResult obc_prune(const LayerSnapshot &layer, const SolverWorkspace &ws, const CompressionConfig &config,
                              std::size_t workers = 1)
{
  const DenseMatrix &w = layer.weight;
  config.validate_for(w.cols());
  if (ws.dim() != w.cols())
    throw ConfigError("obc: workspace dimension " + std::to_string(ws.dim()) + " does not match d_col " +
                      std::to_string(w.cols()));
  const std::size_t b = config.block;
  SparsityMask mask = detail::initial_mask(layer, b);
  DenseMatrix out(w.rows(), w.cols());

  std::vector<std::size_t> need;
  if (config.budget == BudgetScope::PerRow)
  {
    need = detail::per_row_new_removals(mask, config.row_budget(w.cols()), b);
  }
  else
  {
    // Trace every row to full removal, then keep the globally cheapest steps.
    std::vector<std::vector<double>> losses(w.rows());
    const SparsityMask start = mask;
    parallel_for(w.rows(), workers, [&](std::size_t r) {
      std::vector<float> tmp_w(w.cols());
      std::vector<std::uint8_t> tmp_keep(start.keep.begin() + static_cast<std::ptrdiff_t>(r * w.cols()),
                                         start.keep.begin() + static_cast<std::ptrdiff_t>((r + 1) * w.cols()));
      const std::size_t alive = w.cols() / b - detail::dead_units(start, r, b);
      detail::obc_row(tmp_w, tmp_keep, w.row(r), ws.hessian_inv, alive, b, layer.layer_id, &losses[r]);
    });
    std::vector<detail::Candidate> steps;
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t k = 0; k < losses[r].size(); ++k)
        steps.push_back({losses[r][k], r, k});
    const std::size_t total = detail::layer_new_removals(mask, config.layer_budget(w.rows(), w.cols()), b);
    std::partial_sort(steps.begin(), steps.begin() + static_cast<std::ptrdiff_t>(std::min(total, steps.size())),
                      steps.end(), detail::candidate_less);
    need.assign(w.rows(), 0);
    for (std::size_t i = 0; i < std::min(total, steps.size()); ++i)
      ++need[steps[i].row];
  }

  parallel_for(w.rows(), workers, [&](std::size_t r) {
    std::span<std::uint8_t> keep(mask.keep.data() + r * w.cols(), w.cols());
    detail::obc_row(out.row(r), keep, w.row(r), ws.hessian_inv, need[r], b, layer.layer_id);
  });
  return {layer.layer_id, SolverKind::OBC, std::move(out), std::move(mask), std::nullopt, {}};
}

/// FastOBC (SparseGPT-style): columns are swept left to right in blocks. At
/// the start of each block the mask for that block is chosen per row from the
/// current (error-compensated) weights using the OBS saliency relative to the
/// still-unprocessed columns, w_j^2 / sum_{k=i1..j} C_kj^2, where C is the
/// upper Cholesky factor of H^-1 and i1 the block start (for j = i1 this is
/// w_j^2 / C_jj^2). Each column is then fixed and its error propagated to the
/// unprocessed columns through row j of C.
inline SolverResult fastobc_prune(const LayerSnapshot &layer, const SolverWorkspace &ws,
                                  const CompressionConfig &config, std::size_t blocksize = 0)
{
  const DenseMatrix &w0 = layer.weight;
  config.validate_for(w0.cols());
  const std::size_t d = w0.cols();
  const std::size_t rows = w0.rows();
  if (ws.dim() != d)
    throw ConfigError("fastobc: workspace dimension does not match d_col");
  const std::size_t b = config.block;
  if (blocksize == 0)
    blocksize = config.fastobc_blocksize;
  blocksize = std::max(b, (blocksize / b) * b);

  MatrixD c;
  try
  {
    c = cholesky(ws.hessian_inv).transposed();
  }
  catch (const NumericError &)
  {
    throw NumericError("fastobc: layer " + layer.layer_id + " inverse Hessian is not positive definite");
  }

  SparsityMask mask = detail::initial_mask(layer, b);
  const std::size_t units = d / b;

  // Spread each row's new removals over the column blocks in proportion to
  // the surviving units each block holds.
  std::vector<std::size_t> alive_total(rows, 0);
  for (std::size_t r = 0; r < rows; ++r)
    alive_total[r] = units - detail::dead_units(mask, r, b);
  std::vector<std::size_t> need_row;
  std::size_t need_layer = 0;
  std::size_t alive_layer = 0;
  if (config.budget == BudgetScope::PerRow)
    need_row = detail::per_row_new_removals(mask, config.row_budget(d), b);
  else
  {
    need_layer = detail::layer_new_removals(mask, config.layer_budget(rows, d), b);
    alive_layer = std::accumulate(alive_total.begin(), alive_total.end(), std::size_t{0});
  }
  std::vector<std::size_t> alive_seen(rows, 0), removed(rows, 0);
  std::size_t alive_seen_layer = 0, removed_layer = 0;

  MatrixD w = w0.cast<double>();
  std::vector<double> denom(d);
  for (std::size_t i1 = 0; i1 < d; i1 += blocksize)
  {
    const std::size_t i2 = std::min(d, i1 + blocksize);
    for (std::size_t j = i1; j < i2; ++j)
    {
      double s = 0.0;
      for (std::size_t k = i1; k <= j; ++k)
        s += c(k, j) * c(k, j);
      denom[j] = s;
    }
    auto unit_score = [&](std::size_t r, std::size_t u) {
      double s = 0.0;
      for (std::size_t j = u * b; j < (u + 1) * b; ++j)
        s += w(r, j) * w(r, j) / denom[j];
      return s;
    };

    if (config.budget == BudgetScope::PerRow)
    {
      for (std::size_t r = 0; r < rows; ++r)
      {
        std::vector<detail::Candidate> cands;
        for (std::size_t u = i1 / b; u < i2 / b; ++u)
          if (detail::unit_alive(mask, r, u, b))
            cands.push_back({unit_score(r, u), r, u});
        alive_seen[r] += cands.size();
        const std::size_t target = alive_total[r] == 0 ? 0 : need_row[r] * alive_seen[r] / alive_total[r];
        const std::size_t now = std::min(target > removed[r] ? target - removed[r] : 0, cands.size());
        detail::prune_lowest(std::move(cands), now, mask, b);
        removed[r] += now;
      }
    }
    else
    {
      std::vector<detail::Candidate> cands;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t u = i1 / b; u < i2 / b; ++u)
          if (detail::unit_alive(mask, r, u, b))
            cands.push_back({unit_score(r, u), r, u});
      alive_seen_layer += cands.size();
      const std::size_t target = alive_layer == 0 ? 0 : need_layer * alive_seen_layer / alive_layer;
      const std::size_t now = std::min(target > removed_layer ? target - removed_layer : 0, cands.size());
      detail::prune_lowest(std::move(cands), now, mask, b);
      removed_layer += now;
    }

    for (std::size_t i = i1; i < i2; ++i)
    {
      const double cii = c(i, i);
      auto ci = c.row(i);
      for (std::size_t r = 0; r < rows; ++r)
      {
        if (mask.kept(r, i))
          continue;
        const double err = w(r, i) / cii;
        auto wr = w.row(r);
        for (std::size_t j = i + 1; j < d; ++j)
          wr[j] -= err * ci[j];
        wr[i] = 0.0;
      }
    }
  }

  DenseMatrix out = w.cast<float>();
  mask.apply(out);
  return {layer.layer_id, SolverKind::FastOBC, std::move(out), std::move(mask), std::nullopt, {}};
}

/// OBC for layers with d_col <= threshold (inclusive), FastOBC above.
inline SolverKind hybrid_dispatch(std::size_t d_col, const CompressionConfig &config)
{
  return d_col <= config.hybrid_threshold ? SolverKind::OBC : SolverKind::FastOBC;
}

inline SolverKind hybrid_dispatch(const LayerSnapshot &layer, const CompressionConfig &config)
{
  return hybrid_dispatch(layer.weight.cols(), config);
}

/// Structured input-channel pruning: greedily drops the input column whose
/// joint removal across all rows (with OBS compensation of every row) raises
/// the layer error least, until `keep` columns remain. Returns the physically
/// reduced d_row x keep matrix and the kept column indices in original order.
inline SolverResult ziplm_structured(const LayerSnapshot &layer, const SolverWorkspace &ws, std::size_t keep)
{
  const std::size_t d = layer.weight.cols();
  const std::size_t rows = layer.weight.rows();
  if (keep == 0 || keep > d)
    throw ConfigError("ziplm: keep must be in [1, d_col], got " + std::to_string(keep));
  if (ws.dim() != d)
    throw ConfigError("ziplm: workspace dimension does not match d_col");

  MatrixD w = layer.weight.cast<double>();
  MatrixD hinv = ws.hessian_inv;
  std::vector<std::uint8_t> alive(d, 1);
  for (std::size_t step = 0; step < d - keep; ++step)
  {
    std::size_t best = d;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < d; ++p)
    {
      if (!alive[p])
        continue;
      const double hpp = hinv(p, p);
      if (!(hpp > 0.0))
        throw NumericError("ziplm: layer " + layer.layer_id + " lost positive definiteness during downdate");
      double norm2 = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        norm2 += w(r, p) * w(r, p);
      const double score = norm2 / hpp;
      if (best == d || score < best_score)
      {
        best = p;
        best_score = score;
      }
    }
    const double hpp = hinv(best, best);
    const std::vector<double> col(hinv.row(best).begin(), hinv.row(best).end());
    for (std::size_t r = 0; r < rows; ++r)
    {
      const double coef = w(r, best) / hpp;
      if (coef == 0.0)
        continue;
      auto wr = w.row(r);
      for (std::size_t j = 0; j < d; ++j)
        wr[j] -= coef * col[j];
      wr[best] = 0.0;
    }
    for (std::size_t i = 0; i < d; ++i)
    {
      const double ci = col[i] / hpp;
      if (ci == 0.0)
        continue;
      auto hi = hinv.row(i);
      for (std::size_t j = 0; j < d; ++j)
        hi[j] -= ci * col[j];
    }
    for (std::size_t j = 0; j < d; ++j)
      hinv(best, j) = hinv(j, best) = 0.0;
    alive[best] = 0;
  }

  SolverResult res;
  res.layer_id = layer.layer_id;
  res.solver = SolverKind::ZipLM;
  for (std::size_t j = 0; j < d; ++j)
    if (alive[j])
      res.kept_channels.push_back(j);
  res.weight = DenseMatrix(rows, keep);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < keep; ++k)
      res.weight(r, k) = static_cast<float>(w(r, res.kept_channels[k]));
  res.mask = SparsityMask::all_kept(layer.layer_id, rows, keep);
  return res;
}

/// Round-to-nearest onto a grid (baseline for GPTQ); masked entries become zero.
inline DenseMatrix rtn_quantize(const DenseMatrix &w, const QuantGrid &grid, const SparsityMask *mask = nullptr)
{
  DenseMatrix q(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c)
      q(r, c) = (mask && !mask->kept(r, c)) ? 0.0f : grid.snap(r, w(r, c));
  return q;
}

/// GPTQ: per-row asymmetric grid from the row's min/max (widened to contain
/// zero); columns are quantized left to right and each column's rounding
/// error is fed back onto the unquantized columns through the upper Cholesky
/// factor of H^-1. Masked positions quantize to exactly zero.
inline SolverResult gptq_quantize(const LayerSnapshot &layer, const SolverWorkspace &ws, unsigned bits,
                                  const SparsityMask *mask = nullptr)
{
  const std::size_t d = layer.weight.cols();
  const std::size_t rows = layer.weight.rows();
  if (ws.dim() != d)
    throw ConfigError("gptq: workspace dimension does not match d_col");
  if (mask && (mask->rows != rows || mask->cols != d))
    throw ConfigError("gptq: mask shape does not match weight");
  const QuantGrid grid = QuantGrid::fit(layer.weight, bits);
  MatrixD c;
  try
  {
    c = cholesky(ws.hessian_inv).transposed();
  }
  catch (const NumericError &)
  {
    throw NumericError("gptq: layer " + layer.layer_id + " inverse Hessian is not positive definite");
  }

  MatrixD w = layer.weight.cast<double>();
  DenseMatrix q(rows, d);
  for (std::size_t i = 0; i < d; ++i)
  {
    const double cii = c(i, i);
    auto ci = c.row(i);
    for (std::size_t r = 0; r < rows; ++r)
    {
      const float qi = (mask && !mask->kept(r, i)) ? 0.0f : grid.snap(r, w(r, i));
      q(r, i) = qi;
      const double err = (w(r, i) - static_cast<double>(qi)) / cii;
      if (err == 0.0)
        continue;
      auto wr = w.row(r);
      for (std::size_t j = i + 1; j < d; ++j)
        wr[j] -= err * ci[j];
    }
  }

  SolverResult res;
  res.layer_id = layer.layer_id;
  res.solver = SolverKind::GPTQ;
  res.weight = std::move(q);
  res.mask = mask ? *mask : SparsityMask::all_kept(layer.layer_id, rows, d);
  res.quant = grid;
  return res;
}

/// Runs the configured pruning solver on one layer (HybridOBC resolved by
/// input dimension). GPTQ as the solver means quantization only.
inline SolverResult solve_layer(const LayerSnapshot &layer, const CompressionConfig &config, std::size_t workers = 1)
{
  config.validate_for(layer.weight.cols());
  if (layer.x.rows() != layer.weight.cols())
    throw ConfigError("layer " + layer.layer_id + ": activations have " + std::to_string(layer.x.rows()) +
                      " rows, weight has " + std::to_string(layer.weight.cols()) + " columns");
  SolverKind kind = config.solver;
  if (kind == SolverKind::HybridOBC)
    kind = hybrid_dispatch(layer, config);
  switch (kind)
  {
    case SolverKind::Magnitude: return magnitude_prune(layer, config);
    case SolverKind::AdaPrune: return adaprune(layer, config);
    case SolverKind::OBC: return obc_prune(layer, compute_hessian(layer.x, config.damping), config, workers);
    case SolverKind::FastOBC: return fastobc_prune(layer, compute_hessian(layer.x, config.damping), config);
    case SolverKind::ZipLM:
    {
      const std::size_t d = layer.weight.cols();
      std::size_t keep = config.structured_keep;
      if (keep == 0)
        keep = d - static_cast<std::size_t>(std::ceil(config.sparsity * static_cast<double>(d) - 1e-9));
      return ziplm_structured(layer, compute_hessian(layer.x, config.damping), std::max<std::size_t>(1, keep));
    }
    case SolverKind::GPTQ:
      return gptq_quantize(layer, compute_hessian(layer.x, config.damping), config.bits.value_or(8),
                           layer.prior ? &*layer.prior : nullptr);
    case SolverKind::HybridOBC: break;
  }
  throw ConfigError("unreachable solver kind");
}

/// One line of the per-layer error log.
struct LayerLogEntry
{
  std::string layer;
  std::string solver;
  double sparsity = 0.0;
  /// Error of applying the final mask (and grid) without compensation.
  double error_before = 0.0;
  double error_after = 0.0;
  double millis = 0.0;

  nlohmann::json to_json() const
  {
    return {{"layer", layer},           {"solver", solver},           {"sparsity", sparsity},
            {"error_before", error_before}, {"error_after", error_after}, {"millis", millis}};
  }
};

/// Uncompensated reference for a result: original weights with the result's
/// mask applied (and snapped to its grid when quantized).
inline DenseMatrix uncompensated(const DenseMatrix &w, const SolverResult &res)
{
  DenseMatrix ref = w;
  res.mask.apply(ref);
  if (res.quant)
    ref = rtn_quantize(ref, *res.quant, &res.mask);
  return ref;
}

/// Solver outputs as "compressed/<layer-id>/weight|mask|kept_channels|qscale|qzero".
inline TensorMap solver_result_tensors(const std::vector<SolverResult> &results)
{
  TensorMap t;
  for (const auto &r : results)
  {
    const std::string p = "compressed/" + r.layer_id;
    t[p + "/weight"] = Tensor(r.weight);
    t[p + "/mask"] = r.mask.to_tensor();
    if (!r.kept_channels.empty())
    {
      std::vector<float> k(r.kept_channels.begin(), r.kept_channels.end());
      t[p + "/kept_channels"] = Tensor::vector(std::move(k));
    }
    if (r.quant)
    {
      t[p + "/qscale"] = Tensor::vector(r.quant->scale);
      t[p + "/qzero"] = Tensor::vector(r.quant->zero);
    }
  }
  return t;
}

} // namespace taco

#endif // TACO_SOLVERS_HPP
