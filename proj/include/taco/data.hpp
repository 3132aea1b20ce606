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

#ifndef TACO_DATA_HPP
#define TACO_DATA_HPP

#include "taco/errors.hpp"
#include "taco/matrix.hpp"
#include "taco/tensor_store.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace taco
{

/// A subtask: an ordered subset of the generalist's classes.
struct TaskSpec
{
  std::string name;
  std::vector<std::size_t> class_ids;

  std::size_t size() const noexcept { return class_ids.size(); }

  /// Position of a generalist class within the task, or npos.
  std::size_t local_index(std::size_t class_id) const noexcept
  {
    auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
    return (it != class_ids.end() && *it == class_id) ? static_cast<std::size_t>(it - class_ids.begin())
                                                      : static_cast<std::size_t>(-1);
  }

  void validate(std::size_t class_count) const
  {
    if (class_ids.empty())
      throw ConfigError("task '" + name + "': no classes");
    for (std::size_t i = 0; i < class_ids.size(); ++i)
    {
      if (class_ids[i] >= class_count)
        throw ConfigError("task '" + name + "': class id " + std::to_string(class_ids[i]) + " out of range (" +
                          std::to_string(class_count) + " classes)");
      if (i > 0 && class_ids[i] <= class_ids[i - 1])
        throw ConfigError("task '" + name + "': class ids must be strictly increasing");
    }
  }

  static TaskSpec all_classes(std::size_t class_count, std::string name = "full")
  {
    TaskSpec t{std::move(name), {}};
    for (std::size_t c = 0; c < class_count; ++c)
      t.class_ids.push_back(c);
    return t;
  }

  /// Parses "4,5,6,7" or "@path" (file with comma/whitespace separated ids).
  static TaskSpec parse(const std::string &text)
  {
    std::string body = text;
    std::string name = text;
    if (!text.empty() && text.front() == '@')
    {
      std::ifstream in(text.substr(1));
      if (!in)
        throw IoError("cannot read task file " + text.substr(1));
      std::stringstream ss;
      ss << in.rdbuf();
      body = ss.str();
      name = std::filesystem::path(text.substr(1)).stem().string();
    }
    TaskSpec t{name, {}};
    std::size_t i = 0;
    while (i < body.size())
    {
      while (i < body.size() && (body[i] == ',' || std::isspace(static_cast<unsigned char>(body[i]))))
        ++i;
      if (i >= body.size())
        break;
      std::size_t v = 0;
      auto [ptr, ec] = std::from_chars(body.data() + i, body.data() + body.size(), v);
      if (ec != std::errc())
        throw ConfigError("task: cannot parse class id list '" + text + "'");
      t.class_ids.push_back(v);
      i = static_cast<std::size_t>(ptr - body.data());
    }
    std::sort(t.class_ids.begin(), t.class_ids.end());
    if (std::adjacent_find(t.class_ids.begin(), t.class_ids.end()) != t.class_ids.end())
      throw ConfigError("task: duplicate class id in '" + text + "'");
    return t;
  }

  std::string to_string() const
  {
    std::string s;
    for (std::size_t c : class_ids)
      s += (s.empty() ? "" : ",") + std::to_string(c);
    return s;
  }

  friend bool operator==(const TaskSpec &, const TaskSpec &) = default;
};

/// Inputs (samples x features) with integer labels over `class_count` classes.
struct LabeledDataset
{
  DenseMatrix inputs;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return inputs.cols(); }

  void validate() const
  {
    if (inputs.rows() != labels.size())
      throw ConfigError("dataset: " + std::to_string(inputs.rows()) + " inputs but " + std::to_string(labels.size()) +
                        " labels");
    for (std::size_t l : labels)
      if (l >= class_count)
        throw ConfigError("dataset: label " + std::to_string(l) + " out of range");
  }

  LabeledDataset select(const std::vector<std::size_t> &rows) const
  {
    LabeledDataset out;
    out.class_count = class_count;
    out.inputs = DenseMatrix(rows.size(), dim());
    for (std::size_t i = 0; i < rows.size(); ++i)
    {
      std::copy(inputs.row(rows[i]).begin(), inputs.row(rows[i]).end(), out.inputs.row(i).begin());
      out.labels.push_back(labels[rows[i]]);
    }
    return out;
  }

  /// Samples whose label belongs to the task, relabelled to task positions.
  LabeledDataset restrict_to(const TaskSpec &task) const
  {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (task.local_index(labels[i]) != static_cast<std::size_t>(-1))
        rows.push_back(i);
    LabeledDataset out = select(rows);
    for (auto &l : out.labels)
      l = task.local_index(l);
    out.class_count = task.size();
    return out;
  }
};

/// Train/test pair as stored in a dataset file.
struct DatasetSplits
{
  LabeledDataset train;
  LabeledDataset test;
  std::string provenance;
};

inline Tensor labels_tensor(const std::vector<std::size_t> &labels)
{
  std::vector<float> v(labels.begin(), labels.end());
  return Tensor::vector(std::move(v));
}

inline std::vector<std::size_t> labels_from_tensor(const Tensor &t)
{
  std::vector<std::size_t> out;
  out.reserve(t.values.size());
  for (float v : t.values)
  {
    if (v < 0.0f || v != std::floor(v))
      throw FormatError("labels: non-integral label value");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline void save_dataset(const std::filesystem::path &path, const DatasetSplits &d)
{
  TensorMap t;
  t["train/inputs"] = Tensor(d.train.inputs);
  t["train/labels"] = labels_tensor(d.train.labels);
  t["test/inputs"] = Tensor(d.test.inputs);
  t["test/labels"] = labels_tensor(d.test.labels);
  write_container(path, t, {{"class_count", std::to_string(d.train.class_count)}, {"provenance", d.provenance}});
}

inline DatasetSplits load_dataset(const std::filesystem::path &path)
{
  const TensorContainer c = read_container(path);
  auto it = c.metadata.find("class_count");
  if (it == c.metadata.end())
    throw FormatError("dataset " + path.string() + ": missing class_count metadata");
  DatasetSplits d;
  d.train.class_count = d.test.class_count = std::stoul(it->second);
  d.train.inputs = require_tensor(c, "train/inputs").matrix();
  d.train.labels = labels_from_tensor(require_tensor(c, "train/labels"));
  d.test.inputs = require_tensor(c, "test/inputs").matrix();
  d.test.labels = labels_from_tensor(require_tensor(c, "test/labels"));
  if (auto p = c.metadata.find("provenance"); p != c.metadata.end())
    d.provenance = p->second;
  else
    d.provenance = path.string();
  d.train.validate();
  d.test.validate();
  return d;
}

} // namespace taco

#endif // TACO_DATA_HPP
