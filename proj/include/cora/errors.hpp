#pragma once

#include <stdexcept>
#include <string>

namespace cora {

/// Failure categories raised by the library. The CLI maps them onto exit codes.
enum class Errc {
  order_mismatch,
  shape_mismatch,
  geometry,
  numeric,
  invalid_argument,
  out_of_range,
  io,
  bad_magic,
  version_mismatch,
  shape_composition,
  truncated,
  integrity,
  format,
};

const char* to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace cora
