#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mtv {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values or arguments outside a function's numeric domain.
struct NumericError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Malformed or inconsistent on-disk data. `kind` is a short stable tag
/// ("bad magic", "version mismatch", "truncated", "crc mismatch", ...).
struct FormatError : Error {
  FormatError(std::string kind, const std::string& detail)
      : Error(kind + (detail.empty() ? "" : ": " + detail)), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ContextOverflow : Error {
  ContextOverflow(std::size_t required, std::size_t available, const std::string& where = "")
      : Error("context overflow" + (where.empty() ? std::string() : " in " + where) + ": required " +
              std::to_string(required) + " positions, available " + std::to_string(available)),
        required(required),
        available(available) {}
  std::size_t required;
  std::size_t available;
};

/// Generation ran out of context before producing every requested token.
struct TruncatedOutput : Error {
  TruncatedOutput(std::vector<int> partial, std::size_t requested)
      : Error("truncated output: produced " + std::to_string(partial.size()) + " of " +
              std::to_string(requested) + " tokens"),
        partial(std::move(partial)) {}
  std::vector<int> partial;
};

struct FingerprintMismatch : Error {
  FingerprintMismatch(const std::string& expected, const std::string& actual)
      : Error("fingerprint mismatch: artifact " + expected + ", model " + actual) {}
};

}  // namespace mtv
