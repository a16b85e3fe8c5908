#pragma once

#include <stdexcept>
#include <string>

namespace fedpdpo {

// Error taxonomy. Everything derives from Error so callers can catch the
// whole family, while tests can pin down the specific failure class.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid scalar input to a math function (non-finite, empty row, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Violated API precondition: dimension mismatch, bad range, empty batch.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied data: out-of-vocab token, empty response, overlong seq.
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Structurally valid file with wrong/missing fields. Carries a line number
// when the source is line-oriented.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Unparseable input (malformed JSON line etc.).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Client/server exchange with incompatible shapes or weights.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Finite-difference oracle could not evaluate the target function.
class OracleError : public Error {
 public:
  using Error::Error;
};

// Batch-level failure, e.g. every sample excluded by filtering.
class BatchError : public Error {
 public:
  using Error::Error;
};

// I/O failure, reported with the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedpdpo
