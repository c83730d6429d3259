#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace capt {

// Base of every error raised by the library. Callers that only care about
// "something in the engine failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidToken : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class MalformedSpec : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContextTooLong : public Error {
 public:
  using Error::Error;
};

class BackendUnavailable : public Error {
 public:
  BackendUnavailable(const std::string& what, std::int64_t retry_after_ms)
      : Error(what), retry_after_ms_(retry_after_ms) {}

  // Suggested wait before retrying, in milliseconds.
  std::int64_t retry_after_ms() const noexcept { return retry_after_ms_; }

 private:
  std::int64_t retry_after_ms_;
};

class Unencodable : public Error {
 public:
  using Error::Error;
};

class VocabMismatch : public Error {
 public:
  using Error::Error;
};

class EmptyCandidateSet : public Error {
 public:
  using Error::Error;
};

class Uncompletable : public Error {
 public:
  using Error::Error;
};

class IllegalAdvance : public Error {
 public:
  using Error::Error;
};

class MethodMismatch : public Error {
 public:
  using Error::Error;
};

class LengthMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace capt
