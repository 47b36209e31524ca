#pragma once

#include <stdexcept>
#include <string>

namespace xai3d {

enum class ErrorKind {
  invalid_argument,
  dimension_mismatch,
  numeric,
  io,
  config,
  missing_prerequisite,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::dimension_mismatch: return "dimension mismatch";
    case ErrorKind::numeric: return "numeric failure";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::config: return "configuration error";
    case ErrorKind::missing_prerequisite: return "missing prerequisite";
  }
  return "error";
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace xai3d
