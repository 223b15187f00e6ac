#pragma once

#include <stdexcept>
#include <string>

namespace marq {

enum class Errc {
  io,
  format,
  invalid_argument,
  dimension_mismatch,
  not_found,
  numeric,
  usage,
};

const char* to_string(Errc code);

// All library failures surface as marq::Error. The CLI maps Errc::usage to
// exit status 2 and everything else to 1.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what);
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& what);

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace marq
