#pragma once

#include <stdexcept>
#include <string>

namespace inrc {

// Mirrors the status codes of the public C API (inrchange.h).
enum class Errc {
  invalid_argument = 1,
  io = 2,
  parse = 3,
  numeric = 4,
  degenerate_data = 5,
  internal = 6,
};

class Error : public std::runtime_error {
public:
  Error(Errc code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
  Errc code() const { return code_; }

private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

} // namespace inrc
