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

#ifndef TACO_CONSTRAINTS_HPP
#define TACO_CONSTRAINTS_HPP

#include "taco/errors.hpp"
#include "taco/matrix.hpp"
#include "taco/tensor_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace taco
{

/// Kept/pruned pattern of one layer's weight matrix; true means kept.
struct SparsityMask
{
  std::string layer_id;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  static SparsityMask all_kept(std::string id, std::size_t rows, std::size_t cols)
  {
    return {std::move(id), rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
  }

  /// Mask of the nonzero entries of w.
  static SparsityMask from_nonzeros(std::string id, const DenseMatrix &w)
  {
    SparsityMask m = all_kept(std::move(id), w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i)
      m.keep[i] = w.values()[i] != 0.0f;
    return m;
  }

  bool kept(std::size_t r, std::size_t c) const noexcept { return keep[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool k) noexcept { keep[r * cols + c] = k ? 1 : 0; }

  std::size_t kept_count() const noexcept { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }

  std::size_t pruned_in_row(std::size_t r) const noexcept
  {
    return static_cast<std::size_t>(
      std::count(keep.begin() + static_cast<std::ptrdiff_t>(r * cols), keep.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), 0));
  }

  double sparsity() const noexcept
  {
    return keep.empty() ? 0.0 : 1.0 - static_cast<double>(kept_count()) / static_cast<double>(keep.size());
  }

  /// Zeroes every pruned position of w.
  template <typename T> void apply(Matrix<T> &w) const
  {
    if (w.rows() != rows || w.cols() != cols)
      throw ConfigError("mask '" + layer_id + "': shape does not match weight");
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i])
        w.values()[i] = T{0};
  }

  /// Number of pruned positions where w is nonzero.
  std::size_t violations(const DenseMatrix &w) const
  {
    std::size_t n = 0;
    for (std::size_t i = 0; i < keep.size(); ++i)
      n += (!keep[i] && w.values()[i] != 0.0f) ? 1 : 0;
    return n;
  }

  /// True when every position kept here is also kept in `outer`.
  bool nested_in(const SparsityMask &outer) const
  {
    if (outer.rows != rows || outer.cols != cols)
      return false;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i] && !outer.keep[i])
        return false;
    return true;
  }

  /// Each aligned group of `block` entries along a row is uniformly kept or pruned.
  bool block_structured(std::size_t block) const
  {
    if (block == 0 || cols % block != 0)
      return false;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t g = 0; g < cols; g += block)
        for (std::size_t j = 1; j < block; ++j)
          if (kept(r, g + j) != kept(r, g))
            return false;
    return true;
  }

  Tensor to_tensor() const
  {
    std::vector<float> v(keep.begin(), keep.end());
    return Tensor({rows, cols}, std::move(v));
  }

  static SparsityMask from_tensor(std::string id, const Tensor &t)
  {
    const DenseMatrix m = t.matrix();
    SparsityMask out = all_kept(std::move(id), m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i)
    {
      const float v = m.values()[i];
      if (v != 0.0f && v != 1.0f)
        throw FormatError("mask '" + out.layer_id + "': values must be 0 or 1");
      out.keep[i] = v == 1.0f;
    }
    return out;
  }

  friend bool operator==(const SparsityMask &, const SparsityMask &) = default;
};

/// Per-row asymmetric uniform quantization grid. Grid points are
/// scale * (q - zero) for integer q in [0, 2^bits - 1]; zero is always a grid point.
struct QuantGrid
{
  unsigned bits = 8;
  std::vector<float> scale;
  std::vector<float> zero;
  std::vector<std::uint8_t> degenerate;

  double levels() const noexcept { return std::ldexp(1.0, static_cast<int>(bits)) - 1.0; }

  /// Grid for each row of w from its min/max, widened to contain zero.
  static QuantGrid fit(const DenseMatrix &w, unsigned bits)
  {
    if (bits != 8)
      throw ConfigError("quantization: only 8-bit grids are supported (got " + std::to_string(bits) + ")");
    QuantGrid g;
    g.bits = bits;
    const double maxq = g.levels();
    for (std::size_t r = 0; r < w.rows(); ++r)
    {
      auto row = w.row(r);
      const auto [lo_it, hi_it] = std::minmax_element(row.begin(), row.end());
      const double raw_lo = row.empty() ? 0.0 : *lo_it;
      const double raw_hi = row.empty() ? 0.0 : *hi_it;
      const double lo = std::min(raw_lo, 0.0);
      const double hi = std::max(raw_hi, 0.0);
      g.degenerate.push_back(raw_lo == raw_hi ? 1 : 0);
      if (hi == lo)
      {
        // Row of zeros: one level.
        g.scale.push_back(1.0f);
        g.zero.push_back(0.0f);
        continue;
      }
      const float s = static_cast<float>((hi - lo) / maxq);
      g.scale.push_back(s);
      g.zero.push_back(static_cast<float>(std::round(-lo / static_cast<double>(s))));
    }
    return g;
  }

  float snap(std::size_t row, double x) const noexcept
  {
    const double s = scale[row];
    const double q = std::clamp(std::round(x / s) + zero[row], 0.0, levels());
    return static_cast<float>(s * (q - zero[row]));
  }

  bool on_grid(std::size_t row, float x) const noexcept { return snap(row, x) == x; }

  /// Number of entries of w that are not grid points of their row.
  std::size_t violations(const DenseMatrix &w) const
  {
    std::size_t n = 0;
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (float v : w.row(r))
        n += on_grid(r, v) ? 0 : 1;
    return n;
  }

  void snap_all(DenseMatrix &w) const
  {
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (float &v : w.row(r))
        v = snap(r, v);
  }

  friend bool operator==(const QuantGrid &, const QuantGrid &) = default;
};

} // namespace taco

#endif // TACO_CONSTRAINTS_HPP
