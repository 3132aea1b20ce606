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

#ifndef TACO_ERRORS_HPP
#define TACO_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace taco
{

/// Base of every error the toolkit throws. `exit_code()` is what the CLI returns.
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid configuration, arguments, or shapes.
class ConfigError : public Error
{
public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Loss of definiteness, divergence, non-finite values.
class NumericError : public Error
{
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// File system failures and malformed on-disk data.
class IoError : public Error
{
public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class FormatError : public IoError
{
public:
  using IoError::IoError;
};

} // namespace taco

#endif // TACO_ERRORS_HPP
