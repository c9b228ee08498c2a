#pragma once

#include <stdexcept>
#include <string>

namespace fedtab {

// Root of every error this library throws. Subclasses name the failing layer so
// callers (and the HTTP surface) can map them onto status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class MetricError : public Error { using Error::Error; };
class IngestError : public Error { using Error::Error; };
class ImputeError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class AggregationError : public Error { using Error::Error; };

// Wire-level failures. `status` is the HTTP status the coordinator answers with.
class ProtocolError : public Error {
 public:
  ProtocolError(int status, std::string code, const std::string& message)
      : Error(message), status_(status), code_(std::move(code)) {}

  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

// Network-level failure that is worth retrying (connection refused, timeout).
class TransientError : public Error { using Error::Error; };

}  // namespace fedtab
