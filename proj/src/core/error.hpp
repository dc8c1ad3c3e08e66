#pragma once

#include <stdexcept>
#include <string>

#include "eager/eager.h"

namespace eager {

// Exception carrying a C-API status code. The capi layer catches these at
// the boundary and turns them into (status, last_error) pairs.
class Error : public std::runtime_error {
public:
  Error(eager_status status, std::string message)
      : std::runtime_error(std::move(message)), status_(status) {}

  eager_status status() const noexcept { return status_; }

private:
  eager_status status_;
};

[[noreturn]] inline void fail(eager_status status, const std::string& message) {
  throw Error(status, message);
}

inline void require(bool cond, eager_status status, const std::string& message) {
  if (!cond) fail(status, message);
}

}  // namespace eager
