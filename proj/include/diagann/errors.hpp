#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace diagann {

/// Root of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated a documented precondition (empty input list, bad argument).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class UnknownSlug : public Error {
 public:
  explicit UnknownSlug(const std::string& slug)
      : Error("unknown symptom slug: '" + slug + "'"), slug_(slug) {}
  const std::string& slug() const { return slug_; }

 private:
  std::string slug_;
};

/// Corrupt corpus input. Carries the zero-based record index (npos when the
/// whole document is malformed).
class SchemaError : public Error {
 public:
  static constexpr std::size_t kNoRecord = static_cast<std::size_t>(-1);

  SchemaError(std::size_t record, const std::string& what)
      : Error(record == kNoRecord
                  ? what
                  : "record " + std::to_string(record) + ": " + what),
        record_(record) {}
  std::size_t record() const { return record_; }

 private:
  std::size_t record_;
};

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

// -- gateway --

class ReplayMiss : public Error {
 public:
  explicit ReplayMiss(const std::string& fingerprint)
      : Error("replay cassette has no exchange for fingerprint " + fingerprint),
        fingerprint_(fingerprint) {}
  const std::string& fingerprint() const { return fingerprint_; }

 private:
  std::string fingerprint_;
};

/// Non-retryable or exhausted endpoint failure. `status` is the last HTTP
/// status seen, 0 for transport errors.
class EndpointError : public Error {
 public:
  EndpointError(int status, const std::string& what)
      : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

class ExhaustedRetries : public EndpointError {
 public:
  ExhaustedRetries(int status, int attempts)
      : EndpointError(status, "gave up after " + std::to_string(attempts) +
                                  " attempts (last status " +
                                  std::to_string(status) + ")"),
        attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

class AuthError : public EndpointError {
 public:
  explicit AuthError(int status)
      : EndpointError(status, "endpoint rejected credentials (HTTP " +
                                  std::to_string(status) + ")") {}
};

// -- response parsing --

class ParseFailure : public Error {
 public:
  ParseFailure(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw_text() const { return raw_; }

 private:
  std::string raw_;
};

class IncompleteVerdicts : public ParseFailure {
 public:
  IncompleteVerdicts(const std::string& missing_slug, std::string raw)
      : ParseFailure("verdict list is missing '" + missing_slug + "'",
                     std::move(raw)),
        missing_(missing_slug) {}
  const std::string& missing_slug() const { return missing_; }

 private:
  std::string missing_;
};

class AlignmentFailure : public Error {
 public:
  AlignmentFailure(const std::string& span, double best_score)
      : Error("span does not align to the post (best similarity " +
              std::to_string(best_score) + "): " + span),
        best_score_(best_score) {}
  double best_score() const { return best_score_; }

 private:
  double best_score_;
};

// -- evaluation --

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class LengthMismatch : public Error {
 public:
  using Error::Error;
};

class DegenerateMarginals : public Error {
 public:
  using Error::Error;
};

class JoinError : public Error {
 public:
  using Error::Error;
};

class SinkError : public Error {
 public:
  using Error::Error;
};

// -- review service --

class DuplicatePost : public Error {
 public:
  using Error::Error;
};

class UnknownTask : public Error {
 public:
  using Error::Error;
};

class UnknownReviewer : public Error {
 public:
  using Error::Error;
};

class InsufficientOverlap : public Error {
 public:
  using Error::Error;
};

class NothingComplete : public Error {
 public:
  using Error::Error;
};

}  // namespace diagann
