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

#ifndef TACO_SYNTH_HPP
#define TACO_SYNTH_HPP

#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/random.hpp"

#include <string>
#include <vector>

namespace taco
{

/// Gaussian-mixture taxonomy: `groups` supergroups of classes/groups classes.
/// Supergroup centers are drawn `group_ratio` times wider than the class
/// centers around them; samples add isotropic unit-scale noise.
struct SynthSpec
{
  std::size_t classes = 16;
  std::size_t groups = 4;
  std::size_t dim = 64;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double class_spread = 0.4;
  double group_ratio = 3.0;
  double noise = 1.0;
  std::uint64_t seed = 0;

  std::size_t group_size() const noexcept { return classes / groups; }

  void validate() const
  {
    if (classes == 0 || groups == 0 || classes % groups != 0)
      throw ConfigError("synth: class count must be a positive multiple of the group count");
    if (dim == 0 || train_per_class == 0 || test_per_class == 0)
      throw ConfigError("synth: dimension and per-class counts must be positive");
    if (!(class_spread > 0.0) || !(group_ratio > 0.0) || !(noise >= 0.0))
      throw ConfigError("synth: spreads must be positive");
  }

  std::string provenance() const
  {
    return "synthetic:classes=" + std::to_string(classes) + ",groups=" + std::to_string(groups) +
           ",dim=" + std::to_string(dim) + ",seed=" + std::to_string(seed);
  }
};

namespace detail
{

inline LabeledDataset draw_split(const std::vector<std::vector<double>> &centers, std::size_t per_class, double noise,
                                 Rng &rng)
{
  const std::size_t classes = centers.size();
  const std::size_t dim = centers.front().size();
  LabeledDataset d;
  d.class_count = classes;
  d.inputs = DenseMatrix(classes * per_class, dim);
  // interleave classes so any prefix is roughly balanced
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < classes; ++c)
    {
      const std::size_t r = d.labels.size();
      for (std::size_t k = 0; k < dim; ++k)
        d.inputs(r, k) = static_cast<float>(centers[c][k] + noise * rng.normal());
      d.labels.push_back(c);
    }
  return d;
}

} // namespace detail

inline DatasetSplits make_synthetic(const SynthSpec &spec)
{
  spec.validate();
  Rng centers_rng(Rng::derive(spec.seed, 1));
  const double group_sd = spec.class_spread * spec.group_ratio;
  std::vector<std::vector<double>> centers(spec.classes, std::vector<double>(spec.dim));
  for (std::size_t g = 0; g < spec.groups; ++g)
  {
    std::vector<double> gc(spec.dim);
    for (double &v : gc)
      v = group_sd * centers_rng.normal();
    for (std::size_t j = 0; j < spec.group_size(); ++j)
    {
      auto &c = centers[g * spec.group_size() + j];
      for (std::size_t k = 0; k < spec.dim; ++k)
        c[k] = gc[k] + spec.class_spread * centers_rng.normal();
    }
  }
  Rng train_rng(Rng::derive(spec.seed, 2));
  Rng test_rng(Rng::derive(spec.seed, 3));
  DatasetSplits out;
  out.train = detail::draw_split(centers, spec.train_per_class, spec.noise, train_rng);
  out.test = detail::draw_split(centers, spec.test_per_class, spec.noise, test_rng);
  out.provenance = spec.provenance();
  return out;
}

/// Subtask of `size` classes aligned with the taxonomy: within one supergroup
/// when size <= group size, otherwise a run of whole supergroups. `index`
/// picks which one.
inline TaskSpec synthetic_task(const SynthSpec &spec, std::size_t size, std::size_t index = 0)
{
  spec.validate();
  if (size == 0 || size > spec.classes)
    throw ConfigError("synth: task size " + std::to_string(size) + " out of range");
  const std::size_t gs = spec.group_size();
  std::size_t first = 0;
  if (size <= gs)
  {
    const std::size_t per_group = gs / size;
    if (per_group == 0 || gs % size != 0)
      throw ConfigError("synth: task size must divide the group size");
    first = (index % (spec.groups * per_group)) * size;
  }
  else
  {
    if (size % gs != 0)
      throw ConfigError("synth: task size must be a multiple of the group size");
    const std::size_t slots = spec.classes / size;
    first = (index % std::max<std::size_t>(1, slots)) * size;
  }
  TaskSpec t{"synth" + std::to_string(size) + "_" + std::to_string(index), {}};
  for (std::size_t c = first; c < first + size; ++c)
    t.class_ids.push_back(c);
  return t;
}

} // namespace taco

#endif // TACO_SYNTH_HPP
