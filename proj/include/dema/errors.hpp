#pragma once

#include <stdexcept>
#include <string>

namespace dema {

// Error categories surfaced through the C API as status codes.
enum class ErrorKind {
  Dimension,
  Config,
  Format,
  Numeric,
  Contract,
  Io,
  EmptyInput,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void expect(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace dema
