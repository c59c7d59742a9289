#pragma once

#include <stdexcept>
#include <string>

namespace netoutlier {

enum class ErrorKind {
  InvalidInput,
  Parse,
  DimensionMismatch,
  DisconnectedGraph,
  Degenerate,
  Decomposition,
  Domain,
  MissingValue,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid input";
    case ErrorKind::Parse: return "parse error";
    case ErrorKind::DimensionMismatch: return "dimension mismatch";
    case ErrorKind::DisconnectedGraph: return "disconnected graph";
    case ErrorKind::Degenerate: return "degenerate estimate";
    case ErrorKind::Decomposition: return "decomposition failure";
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::MissingValue: return "missing value";
  }
  return "error";
}

/// Every failure raised by the library carries a kind so that callers (the
/// CLI in particular) can map it onto a stable exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace netoutlier
