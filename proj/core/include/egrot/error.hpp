#pragma once

#include <stdexcept>
#include <string>

namespace egrot {

// Base of every error raised by the library. `kind()` is a stable short tag
// that the CLI maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define EGROT_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

EGROT_DEFINE_ERROR(DegenerateInput);
EGROT_DEFINE_ERROR(BadCount);
EGROT_DEFINE_ERROR(ShapeMismatch);
EGROT_DEFINE_ERROR(NotScalar);
EGROT_DEFINE_ERROR(MissingGrad);
EGROT_DEFINE_ERROR(IoFailure);
EGROT_DEFINE_ERROR(FormatError);
EGROT_DEFINE_ERROR(ConfigError);
EGROT_DEFINE_ERROR(InsufficientData);
EGROT_DEFINE_ERROR(InsufficientReferences);
EGROT_DEFINE_ERROR(EmptyInput);
EGROT_DEFINE_ERROR(BadLayer);
EGROT_DEFINE_ERROR(IncompatibleCheckpoint);
EGROT_DEFINE_ERROR(HashMismatch);
EGROT_DEFINE_ERROR(MissingEntity);
EGROT_DEFINE_ERROR(GeneratorFailure);

#undef EGROT_DEFINE_ERROR

}  // namespace egrot
