// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace forgetlm {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between operands.
class DimensionError : public Error {
  public:
    using Error::Error;
};

// NaN / Inf encountered where finite values are required.
class NumericError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

// Token id outside the model vocabulary.
class VocabularyError : public Error {
  public:
    using Error::Error;
};

// Sequence longer than the model's positional table.
class LengthError : public Error {
  public:
    using Error::Error;
};

// Token budget or corpus size outside what an operation can serve.
class SizeError : public Error {
  public:
    using Error::Error;
};

class PreconditionError : public Error {
  public:
    using Error::Error;
};

class AssemblyError : public Error {
  public:
    using Error::Error;
};

class EvaluationError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

// Checkpoint load failure. `field()` names the manifest entry or file that was rejected.
class LoadError : public Error {
  public:
    LoadError(std::string field, const std::string& what)
        : Error("checkpoint load error [" + field + "]: " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

  private:
    std::string field_;
};

} // namespace forgetlm
