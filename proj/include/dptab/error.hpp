#pragma once

#include <concepts>
#include <stdexcept>
#include <string>

namespace dptab {

// Base of every error the library throws. The CLI maps the subclasses onto
// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (shape mismatch, empty batch, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN or Inf.
class NumericFault : public Error {
 public:
  NumericFault(const std::string& op, const std::string& detail)
      : Error("numeric fault in " + op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// The requested privacy budget cannot be met inside the supported noise range.
class InfeasibleBudget : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kVersionMismatch, kTruncated, kDigestMismatch, kMalformed };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline void require(bool cond, const char* what) {
  if (!cond) throw ContractViolation(what);
}

// Builds the message only on failure; use for messages that format values.
template <class MakeMessage>
  requires std::invocable<MakeMessage>
inline void require(bool cond, MakeMessage&& make_message) {
  if (!cond) throw ContractViolation(make_message());
}

}  // namespace dptab
