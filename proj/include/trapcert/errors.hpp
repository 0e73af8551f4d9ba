#pragma once

#include <stdexcept>
#include <string>

namespace trapcert {

enum class ErrorKind {
  input,
  domain,
  capability,
  numerical,
  configuration,
  precondition,
  invariant
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::input: return "input";
    case ErrorKind::domain: return "domain";
    case ErrorKind::capability: return "capability";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::invariant: return "invariant";
  }
  return "unknown";
}

/** \brief Base of every error raised by the library. */
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, double value = 0.0)
      : std::runtime_error(what), kind_(kind), value_(value) {}
  ErrorKind kind() const noexcept { return kind_; }
  // residual, achieved error or supported limit, depending on kind
  double value() const noexcept { return value_; }

 private:
  ErrorKind kind_;
  double value_;
};

#define TRAPCERT_DEFINE_ERROR(Name, Kind)                              \
  struct Name : Error {                                                \
    explicit Name(const std::string& w, double v = 0.0)                \
        : Error(ErrorKind::Kind, w, v) {}                              \
  };

TRAPCERT_DEFINE_ERROR(InputError, input)
TRAPCERT_DEFINE_ERROR(DomainError, domain)
TRAPCERT_DEFINE_ERROR(CapabilityError, capability)
TRAPCERT_DEFINE_ERROR(NumericalError, numerical)
TRAPCERT_DEFINE_ERROR(ConfigurationError, configuration)
TRAPCERT_DEFINE_ERROR(PreconditionError, precondition)
TRAPCERT_DEFINE_ERROR(InvariantViolation, invariant)

#undef TRAPCERT_DEFINE_ERROR

}  // namespace trapcert
