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

// Named-tensor archive.
//
//   bytes 0..3    "TACO"
//   bytes 4..7    version, u32 little-endian (1)
//   bytes 8..15   header length H, u64 little-endian
//   bytes 16..    H bytes of UTF-8 JSON:
//                   { "<name>": {"dtype":"f32","shape":[...],"offset":O,"nbytes":N}, ...,
//                     "__metadata__": {"<key>": "<value>", ...} }
//   data section  follows the header; offsets are relative to its start;
//                 values are little-endian IEEE-754 binary32.

#ifndef TACO_TENSOR_STORE_HPP
#define TACO_TENSOR_STORE_HPP

#include "taco/errors.hpp"
#include "taco/matrix.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace taco
{

inline constexpr std::array<char, 4> kContainerMagic = {'T', 'A', 'C', 'O'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr const char *kMetadataKey = "__metadata__";

/// An f32 tensor of arbitrary rank. Matrices are rank 2; label vectors rank 1.
struct Tensor
{
  std::vector<std::size_t> shape;
  std::vector<float> values;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, std::vector<float> values_) : shape(std::move(shape_)), values(std::move(values_))
  {
    if (element_count() != values.size())
      throw ConfigError("tensor: shape does not match value count");
  }
  Tensor(const DenseMatrix &m) : shape{m.rows(), m.cols()}, values(m.values()) {}

  static Tensor vector(std::vector<float> v)
  {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  std::size_t element_count() const
  {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  /// Rank-2 view as a matrix; rank-1 tensors become a single row.
  DenseMatrix matrix() const
  {
    if (shape.size() == 2)
      return DenseMatrix(shape[0], shape[1], values);
    if (shape.size() == 1)
      return DenseMatrix(1, shape[0], values);
    throw ConfigError("tensor: rank " + std::to_string(shape.size()) + " is not a matrix");
  }

  friend bool operator==(const Tensor &, const Tensor &) = default;
};

using TensorMap = std::map<std::string, Tensor>;
using Metadata = std::map<std::string, std::string>;

/// Header entry as it appears on disk.
struct ContainerEntry
{
  std::string dtype;
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct TensorContainer
{
  std::map<std::string, ContainerEntry> entries;
  Metadata metadata;
  TensorMap tensors;
};

namespace detail
{

inline void put_le(std::string &out, std::uint64_t v, int bytes)
{
  for (int i = 0; i < bytes; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const unsigned char *p, int bytes)
{
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void append_f32(std::string &out, float f)
{
  put_le(out, std::bit_cast<std::uint32_t>(f), 4);
}

inline float read_f32(const unsigned char *p)
{
  return std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p, 4)));
}

inline bool valid_utf8(const std::string &s)
{
  std::size_t i = 0;
  while (i < s.size())
  {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = c < 0x80 ? 0 : (c >> 5) == 0x6 ? 1 : (c >> 4) == 0xe ? 2 : (c >> 3) == 0x1e ? 3 : 99;
    if (extra == 99 || i + extra >= s.size())
      return false;
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2)
        return false;
    i += extra + 1;
  }
  return true;
}

inline std::string read_file(const std::filesystem::path &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string() + " for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad())
    throw IoError("read failure on " + path.string());
  return bytes;
}

} // namespace detail

/// Serializes tensors to the container byte layout. Tensors are laid out in
/// name order so the output is a pure function of the input.
inline std::string encode_container(const TensorMap &tensors, const Metadata &metadata = {})
{
  nlohmann::json header = nlohmann::json::object();
  std::string data;
  for (const auto &[name, t] : tensors)
  {
    if (name.empty() || name == kMetadataKey || !detail::valid_utf8(name))
      throw ConfigError("container: invalid tensor name '" + name + "'");
    if (t.element_count() != t.values.size())
      throw ConfigError("container: tensor '" + name + "' shape does not match its values");
    const std::uint64_t offset = data.size();
    for (float v : t.values)
      detail::append_f32(data, v);
    header[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}, {"nbytes", data.size() - offset}};
  }
  if (!metadata.empty())
    header[kMetadataKey] = metadata;

  const std::string json = header.dump();
  std::string out(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_le(out, kContainerVersion, 4);
  detail::put_le(out, json.size(), 8);
  out += json;
  out += data;
  return out;
}

/// Parses and validates a container image.
inline TensorContainer decode_container(const std::string &bytes)
{
  const auto *p = reinterpret_cast<const unsigned char *>(bytes.data());
  if (bytes.size() < 16)
    throw FormatError("container: file too short for header (" + std::to_string(bytes.size()) + " bytes)");
  if (!std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin()))
    throw FormatError("container: bad magic");
  const auto version = detail::get_le(p + 4, 4);
  if (version != kContainerVersion)
    throw FormatError("container: unsupported version " + std::to_string(version));
  const std::uint64_t header_len = detail::get_le(p + 8, 8);
  if (header_len > bytes.size() - 16)
    throw FormatError("container: truncated header");

  nlohmann::json header;
  try
  {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  }
  catch (const nlohmann::json::exception &e)
  {
    throw FormatError(std::string("container: malformed header JSON: ") + e.what());
  }
  if (!header.is_object())
    throw FormatError("container: header is not a JSON object");

  const std::uint64_t data_start = 16 + header_len;
  const std::uint64_t data_len = bytes.size() - data_start;

  TensorContainer out;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto &[name, value] : header.items())
  {
    if (name == kMetadataKey)
    {
      if (!value.is_object())
        throw FormatError("container: metadata is not an object");
      for (const auto &[k, v] : value.items())
      {
        if (!v.is_string())
          throw FormatError("container: metadata value for '" + k + "' is not a string");
        out.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    if (name.empty())
      throw FormatError("container: empty tensor name");
    if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") || !value.contains("offset") ||
        !value.contains("nbytes"))
      throw FormatError("container: entry '" + name + "' is missing fields");
    ContainerEntry e;
    try
    {
      e.dtype = value.at("dtype").get<std::string>();
      e.shape = value.at("shape").get<std::vector<std::size_t>>();
      e.offset = value.at("offset").get<std::uint64_t>();
      e.nbytes = value.at("nbytes").get<std::uint64_t>();
    }
    catch (const nlohmann::json::exception &)
    {
      throw FormatError("container: entry '" + name + "' has malformed fields");
    }
    if (e.dtype != "f32")
      throw FormatError("container: entry '" + name + "' has unsupported dtype " + e.dtype);
    const std::uint64_t count =
      std::accumulate(e.shape.begin(), e.shape.end(), std::uint64_t{1}, std::multiplies<>());
    if (count * 4 != e.nbytes)
      throw FormatError("container: entry '" + name + "' declares " + std::to_string(e.nbytes) +
                        " bytes for " + std::to_string(count) + " f32 values");
    if (e.offset > data_len || e.nbytes > data_len - e.offset)
      throw FormatError("container: entry '" + name + "' extends past end of data (truncated)");
    ranges.emplace_back(e.offset, e.nbytes);

    Tensor t;
    t.shape = e.shape;
    t.values.resize(count);
    const unsigned char *src = p + data_start + e.offset;
    for (std::uint64_t i = 0; i < count; ++i)
      t.values[i] = detail::read_f32(src + 4 * i);
    out.tensors.emplace(name, std::move(t));
    out.entries.emplace(name, std::move(e));
  }

  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i)
    if (ranges[i].second > 0 && ranges[i - 1].first + ranges[i - 1].second > ranges[i].first)
      throw FormatError("container: overlapping tensor byte ranges");
  return out;
}

inline void write_container(const std::filesystem::path &path, const TensorMap &tensors, const Metadata &metadata = {})
{
  const std::string bytes = encode_container(tensors, metadata);
  if (path.has_parent_path())
  {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw IoError("write failure on " + path.string());
}

inline TensorContainer read_container(const std::filesystem::path &path)
{
  return decode_container(detail::read_file(path));
}

/// Looks up a required tensor, with a diagnostic naming the file contents on miss.
inline const Tensor &require_tensor(const TensorContainer &c, const std::string &name)
{
  auto it = c.tensors.find(name);
  if (it == c.tensors.end())
    throw FormatError("container: missing tensor '" + name + "'");
  return it->second;
}

} // namespace taco

#endif // TACO_TENSOR_STORE_HPP
