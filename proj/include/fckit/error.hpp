#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fckit {

/// Error codes raised across the toolkit. Each maps onto one of three
/// categories (validation, I/O, invariant) that the CLI turns into exit codes.
enum class Errc {
  shape_mismatch,
  invalid_argument,
  parse_error,
  missing_column,
  duplicate_sample,
  empty_class,
  non_finite,
  empty_dataset,
  io_error,
  bad_magic,
  bad_version,
  truncated,
  tensor_shape_mismatch,
  unknown_tensor,
  missing_tensor,
  image_format,
  image_dimensions,
  image_truncated,
  image_range,
  invariant,
};

enum class ErrorCategory { validation, io, invariant };

constexpr ErrorCategory category_of(Errc code) noexcept {
  switch (code) {
    case Errc::io_error:
    case Errc::bad_magic:
    case Errc::bad_version:
    case Errc::truncated:
    case Errc::tensor_shape_mismatch:
    case Errc::unknown_tensor:
    case Errc::missing_tensor:
    case Errc::image_format:
    case Errc::image_dimensions:
    case Errc::image_truncated:
    case Errc::image_range:
      return ErrorCategory::io;
    case Errc::invariant:
      return ErrorCategory::invariant;
    default:
      return ErrorCategory::validation;
  }
}

constexpr std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::invalid_argument: return "invalid argument";
    case Errc::parse_error: return "parse error";
    case Errc::missing_column: return "missing column";
    case Errc::duplicate_sample: return "duplicate sample";
    case Errc::empty_class: return "empty class";
    case Errc::non_finite: return "non-finite value";
    case Errc::empty_dataset: return "empty dataset";
    case Errc::io_error: return "i/o error";
    case Errc::bad_magic: return "bad magic";
    case Errc::bad_version: return "bad version";
    case Errc::truncated: return "truncated file";
    case Errc::tensor_shape_mismatch: return "shape mismatch";
    case Errc::unknown_tensor: return "unknown tensor";
    case Errc::missing_tensor: return "missing tensor";
    case Errc::image_format: return "bad image format";
    case Errc::image_dimensions: return "bad image dimensions";
    case Errc::image_truncated: return "short image file";
    case Errc::image_range: return "image value out of range";
    case Errc::invariant: return "invariant violated";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace fckit
