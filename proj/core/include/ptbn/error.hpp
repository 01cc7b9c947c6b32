#pragma once

#include <stdexcept>
#include <string>

namespace ptbn {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Shape or argument contract violated by a caller.
class ShapeError : public Error {
   public:
    using Error::Error;
};

// NaN/Inf produced, or a loss diverged.
class NumericalError : public Error {
   public:
    using Error::Error;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

// An upstream artifact (checkpoint, record table) needed by a command is absent.
class MissingArtifactError : public Error {
   public:
    using Error::Error;
};

}  // namespace ptbn
