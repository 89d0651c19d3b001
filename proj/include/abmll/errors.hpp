#pragma once

#include <stdexcept>
#include <string>

namespace abmll {

// Every failure raised by the library derives from Error. The CLI maps the
// category to a process exit code.
enum class ErrorCategory { kUsage, kData, kIntegrity, kInternal };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ErrorCategory category = ErrorCategory::kInternal)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define ABMLL_DEFINE_ERROR(Name, Category) \
  class Name : public Error {              \
   public:                                 \
    explicit Name(const std::string& what) : Error(what, ErrorCategory::Category) {} \
  }

ABMLL_DEFINE_ERROR(DimensionError, kInternal);
ABMLL_DEFINE_ERROR(DomainError, kInternal);
ABMLL_DEFINE_ERROR(IndexError, kInternal);
ABMLL_DEFINE_ERROR(ContractError, kInternal);
ABMLL_DEFINE_ERROR(LengthError, kInternal);
ABMLL_DEFINE_ERROR(ConfigError, kUsage);
ABMLL_DEFINE_ERROR(UsageError, kUsage);
ABMLL_DEFINE_ERROR(DataError, kData);
ABMLL_DEFINE_ERROR(ParseError, kData);
ABMLL_DEFINE_ERROR(VocabularyError, kData);
ABMLL_DEFINE_ERROR(FormatError, kData);
ABMLL_DEFINE_ERROR(IntegrityError, kIntegrity);

#undef ABMLL_DEFINE_ERROR

}  // namespace abmll
