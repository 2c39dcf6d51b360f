#pragma once

#include <stdexcept>
#include <string>

namespace ssgan {

/// Failure categories. The C API maps these one-to-one onto status codes.
enum class ErrCode {
  invalid_argument,
  shape_mismatch,
  numeric,   // non-finite values, degenerate norms, zero spectral norm
  io,
  config,
  corrupt,   // malformed checkpoint / manifest / image file
  unsupported,
  internal,
};

class Error : public std::runtime_error {
public:
  Error(ErrCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrCode code() const noexcept { return code_; }

private:
  ErrCode code_;
};

[[noreturn]] inline void raise(ErrCode code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, ErrCode code, const std::string& msg) {
  if (!cond) raise(code, msg);
}

}  // namespace ssgan
