#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ermc {

enum class ErrorCode {
  invalid_architecture,
  dimension,
  numeric,
  numeric_overflow,
  domain,
  config,
  diverged,
  parse,
  corrupt_checkpoint,
  no_feasible_segment,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_architecture: return "invalid-architecture";
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::numeric_overflow: return "numeric-overflow";
    case ErrorCode::domain: return "domain";
    case ErrorCode::config: return "config";
    case ErrorCode::diverged: return "diverged";
    case ErrorCode::parse: return "parse";
    case ErrorCode::corrupt_checkpoint: return "corrupt-checkpoint";
    case ErrorCode::no_feasible_segment: return "no-feasible-segment";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Training blew up. Curve training also reports the batch and the sampled t.
class DivergedError : public Error {
 public:
  DivergedError(std::size_t epoch, std::optional<std::size_t> batch = {},
                std::optional<double> t = {})
      : Error(ErrorCode::diverged, describe(epoch, batch, t)),
        epoch_(epoch), batch_(batch), t_(t) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::optional<std::size_t> batch() const noexcept { return batch_; }
  std::optional<double> t() const noexcept { return t_; }

 private:
  static std::string describe(std::size_t epoch, std::optional<std::size_t> batch,
                              std::optional<double> t) {
    std::string s = "non-finite loss at epoch " + std::to_string(epoch);
    if (batch) s += ", batch " + std::to_string(*batch);
    if (t) s += ", t=" + std::to_string(*t);
    return s;
  }

  std::size_t epoch_;
  std::optional<std::size_t> batch_;
  std::optional<double> t_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(ErrorCode::parse, "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CorruptCheckpointError : public Error {
 public:
  CorruptCheckpointError(std::size_t offset, const std::string& what)
      : Error(ErrorCode::corrupt_checkpoint,
              "byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace ermc
