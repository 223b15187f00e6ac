#include "marq/error.hpp"

namespace marq {

const char* to_string(Errc code) {
  switch (code) {
    case Errc::io: return "io";
    case Errc::format: return "format";
    case Errc::invalid_argument: return "invalid argument";
    case Errc::dimension_mismatch: return "dimension mismatch";
    case Errc::not_found: return "not found";
    case Errc::numeric: return "numeric";
    case Errc::usage: return "usage";
  }
  return "unknown";
}

Error::Error(Errc code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + " error: " + what), code_(code) {}

void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace marq
