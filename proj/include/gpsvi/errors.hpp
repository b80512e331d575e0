/*
 * Copyright 2026 The GPSVI Lab Authors
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

#pragma once

#include <stdexcept>
#include <string>

namespace gpsvi {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Validation errors: bad inputs, configs or files. The CLI maps these to
// exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class RankError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class VocabError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnknownIdError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class EmptyDatasetError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UndefinedMetricError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DegenerateGroupError : public Error {
 public:
  using Error::Error;
};

// Runtime aborts (exit code 2).
class TapeError : public Error {
 public:
  using Error::Error;
};

class NanLossError : public Error {
 public:
  NanLossError(const std::string& what, std::size_t batch_index)
      : Error(what), batch_index_(batch_index) {}
  std::size_t batch_index() const { return batch_index_; }

 private:
  std::size_t batch_index_;
};

}  // namespace gpsvi
