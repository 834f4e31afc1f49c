#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gdist {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class DataError : public Error {
public:
  using Error::Error;
};

class PreconditionError : public Error {
public:
  using Error::Error;
};

class TransferError : public Error {
public:
  using Error::Error;
};

class OracleError : public Error {
public:
  using Error::Error;
};

class TrainingError : public Error {
public:
  TrainingError(const std::string& what, std::size_t batch_index)
      : Error(what + " (batch " + std::to_string(batch_index) + ")"), batch_index_(batch_index) {}
  std::size_t batch_index() const { return batch_index_; }

private:
  std::size_t batch_index_;
};

/// Malformed container file. `offset` is the byte position where decoding failed.
class ParseError : public Error {
public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

private:
  std::size_t offset_;
};

class VersionError : public Error {
public:
  VersionError(unsigned found, unsigned expected)
      : Error("container version " + std::to_string(found) + " is not supported (expected " +
              std::to_string(expected) + ")"),
        found_(found) {}
  unsigned found() const { return found_; }

private:
  unsigned found_;
};

}  // namespace gdist
