#pragma once

#include <stdexcept>
#include <string>

namespace stonefuse {

// Error with a stable machine-parsable code; the CLI prints the code on its
// last output line before exiting nonzero.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace stonefuse
