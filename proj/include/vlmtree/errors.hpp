#pragma once

#include <stdexcept>
#include <string>

namespace vlmtree {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input document. Line and column are 1-based; 0 means unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line = 0, int column = 0)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ", column " +
                             std::to_string(column) + ")"
                       : what),
        line_(line),
        column_(column) {}

  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  int line_;
  int column_;
};

class UnknownClassError : public Error {
 public:
  explicit UnknownClassError(int class_id, const std::string& context = {})
      : Error("unknown class id " + std::to_string(class_id) +
              (context.empty() ? "" : " (" + context + ")")),
        class_id_(class_id) {}

  int class_id() const noexcept { return class_id_; }

 private:
  int class_id_;
};

// Invalid combination of inputs detected before any work is done.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class NoMatchError : public Error {
 public:
  using Error::Error;
};

class CacheCorruptionError : public Error {
 public:
  using Error::Error;
};

}  // namespace vlmtree
