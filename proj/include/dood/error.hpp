#pragma once

#include <stdexcept>
#include <string>

namespace dood {

// Every failure raised by the library carries the owning module and a short
// machine-readable code. The CLI prints them as ERROR:<module>:<code>.
class Error : public std::runtime_error {
 public:
  Error(std::string module, std::string code, const std::string& message)
      : std::runtime_error(message), module_(std::move(module)), code_(std::move(code)) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& code() const noexcept { return code_; }

 private:
  std::string module_;
  std::string code_;
};

// Raised when user-supplied configuration is malformed; the CLI maps this to
// exit status 2 instead of 1.
class ConfigError : public Error {
 public:
  ConfigError(std::string module, std::string code, const std::string& message)
      : Error(std::move(module), std::move(code), message) {}
};

}  // namespace dood
