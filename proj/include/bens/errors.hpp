#pragma once

#include <stdexcept>
#include <string>

namespace bens {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Tensor or layer dimensions that do not line up.
class ShapeError : public Error {
   public:
    using Error::Error;
};

/// Misuse of the autodiff tape (stale handles, non-scalar seeds).
class TapeError : public Error {
   public:
    using Error::Error;
};

/// Malformed or inconsistent dataset / checkpoint bytes.
class FormatError : public Error {
   public:
    using Error::Error;
};

/// Invalid configuration or architecture request.
class ConfigError : public Error {
   public:
    using Error::Error;
};

/// A command ran before the artifact it depends on exists.
class PrerequisiteError : public Error {
   public:
    using Error::Error;
};

/// Training aborted (non-finite loss).
class TrainingError : public Error {
   public:
    TrainingError(const std::string& what, int epoch, int member = -1)
        : Error(what), epoch_(epoch), member_(member) {}

    int epoch() const { return epoch_; }
    int member() const { return member_; }

   private:
    int epoch_;
    int member_;
};

}  // namespace bens
