#pragma once

#include <stdexcept>
#include <string>

namespace factorix {

// Every contract violation in the library surfaces as this type; the message
// names the failed condition.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& message) { throw Error(message); }

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(message);
}

}  // namespace factorix
