#pragma once

#include <stdexcept>
#include <string>

namespace latentedit {

// Base of every error raised by the library. The CLI maps ConfigError to exit
// code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ProjectionError : public Error {
 public:
  ProjectionError(std::size_t point_index, const std::string& what)
      : Error(what), point_index_(point_index) {}
  std::size_t point_index() const { return point_index_; }

 private:
  std::size_t point_index_;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class UndefinedResultError : public Error {
 public:
  using Error::Error;
};

}  // namespace latentedit
