#pragma once

#include <stdexcept>
#include <string>

namespace protomix {

// Every domain failure derives from Error; the CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error { using Error::Error; };
class TruncationError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class DegenerateError : public Error { using Error::Error; };
class SamplingError : public Error { using Error::Error; };
class RankError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class PairingError : public Error { using Error::Error; };
class ConfigurationError : public Error { using Error::Error; };
class ConditioningError : public Error { using Error::Error; };
class InsufficientDataError : public Error { using Error::Error; };

}  // namespace protomix
