#pragma once

#include <stdexcept>
#include <string>

namespace lorentz {

/// Error categories map onto CLI exit codes.
enum class ErrorKind { Config = 2, Budget = 3, Validation = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& what)
      : std::runtime_error(code + ": " + what), kind_(kind), code_(std::move(code)) {}
  ErrorKind kind() const { return kind_; }
  const std::string& code() const { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

inline Error config_error(const std::string& code, const std::string& what) {
  return Error(ErrorKind::Config, code, what);
}
inline Error budget_error(const std::string& code, const std::string& what) {
  return Error(ErrorKind::Budget, code, what);
}

}  // namespace lorentz
