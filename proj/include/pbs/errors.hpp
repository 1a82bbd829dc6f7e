#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pbs {

/// Exit codes used by the CLI. Library exceptions carry one of these so the
/// harness can translate any failure into a stable machine-readable line.
enum class ErrorCode : int {
  config = 2,      // bad configuration, mismatched shapes
  io = 3,          // unreadable files, malformed tensor format
  resource = 4,    // request exceeds desk-scale materialization limits
  degenerate = 5,  // numerically degenerate state (empty softmax row)
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const char* prefix, const std::string& msg)
      : std::runtime_error(msg), code_(code), prefix_(prefix) {}

  ErrorCode code() const { return code_; }
  int exit_code() const { return static_cast<int>(code_); }
  const char* prefix() const { return prefix_; }

private:
  ErrorCode code_;
  const char* prefix_;
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(ErrorCode::config, "E_CONFIG", msg) {}
};

class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error(ErrorCode::config, "E_SHAPE", msg) {}
};

class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(ErrorCode::io, "E_IO", msg) {}
};

/// Malformed tensor file. Carries the byte offset where parsing failed.
class FormatError : public Error {
public:
  FormatError(const std::string& msg, std::size_t byte_offset)
      : Error(ErrorCode::io, "E_FORMAT",
              msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const { return byte_offset_; }

private:
  std::size_t byte_offset_;
};

/// Request would materialize more than the desk-scale limit allows.
class ResourceError : public Error {
public:
  ResourceError(const std::string& msg, std::size_t limit)
      : Error(ErrorCode::resource, "E_RESOURCE",
              msg + " (limit " + std::to_string(limit) + " elements)"),
        limit_(limit) {}

  std::size_t limit() const { return limit_; }

private:
  std::size_t limit_;
};

/// A query row ended with an empty softmax denominator (l == 0), which can
/// only happen under an erroneous block mask.
class DegenerateRowError : public Error {
public:
  explicit DegenerateRowError(std::size_t query_block)
      : Error(ErrorCode::degenerate, "E_DEGENERATE",
              "query block " + std::to_string(query_block) +
                  " has an empty softmax denominator (all keys masked)"),
        query_block_(query_block) {}

  std::size_t query_block() const { return query_block_; }

private:
  std::size_t query_block_;
};

}  // namespace pbs
