#pragma once

#include <stdexcept>
#include <string>

namespace forge {

// Error with a stable machine-readable code. The CLI surfaces these as a
// one-line {"error": code, "message": ...} record and a nonzero exit.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool ok, const std::string& code, const std::string& message) {
  if (!ok) fail(code, message);
}

}  // namespace forge
