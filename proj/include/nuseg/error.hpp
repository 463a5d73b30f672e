#pragma once

#include <stdexcept>
#include <string>

namespace nuseg {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatch between grids that must share a lattice.
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

/// Values outside their admissible domain (e.g. probabilities outside [0,1]).
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

/// Annotation sets with no usable foreground.
struct DegenerateAnnotationError : Error {
  explicit DegenerateAnnotationError(const std::string& msg) : Error(msg) {}
};

/// Metric has no defined value for the given inputs (e.g. two empty masks).
struct UndefinedMetricError : Error {
  explicit UndefinedMetricError(const std::string& msg) : Error(msg) {}
};

/// Malformed or truncated files, bad magic, unsupported dtype codes.
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration (CLI arguments, schedules, generator settings).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Training produced a non-finite loss.
struct TrainingDivergedError : Error {
  TrainingDivergedError(const std::string& msg, int epoch_index)
      : Error(msg + " (epoch " + std::to_string(epoch_index) + ")"),
        epoch(epoch_index) {}
  int epoch;
};

}  // namespace nuseg
