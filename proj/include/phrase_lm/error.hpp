#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace phrase_lm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. `record()` is the offending record index as
/// reported in the message (1-based line numbers for line-delimited files).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t record)
      : Error(what), record_(record) {}

  std::size_t record() const { return record_; }

 private:
  std::size_t record_;
};

/// Invalid configuration value or violated precondition on parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace phrase_lm
