// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace covergen {

// Bad caller input (sizes, ranges, unknown enum names).
using ArgumentError = std::invalid_argument;

// Inconsistent configuration: dimension mismatches, bad config values,
// missing frozen digests. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A required upstream artifact is absent. `producer` names the subcommand
// that creates it. Maps to CLI exit code 3.
class MissingDependency : public std::runtime_error {
 public:
  MissingDependency(const std::string& artifact, std::string producer)
      : std::runtime_error("missing artifact '" + artifact + "'; run `" + producer + "` first"),
        producer_(std::move(producer)) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

// NaN / divergence detected during training or evaluation. Exit code 4.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by the freeze audit when a frozen parameter group changed.
class FrozenParameterChanged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace covergen
