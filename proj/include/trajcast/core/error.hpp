// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace trajcast {

/// Base class of every error raised by the library. `category()` is a short
/// machine-parseable tag that the CLI prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string_view category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  [[nodiscard]] const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define TRAJCAST_DEFINE_ERROR(Name, tag)                               \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(tag, what) {}       \
  };

TRAJCAST_DEFINE_ERROR(DimensionError, "dimension")
TRAJCAST_DEFINE_ERROR(NumericError, "numeric")
TRAJCAST_DEFINE_ERROR(ConfigError, "config")
TRAJCAST_DEFINE_ERROR(TrainingError, "training")
TRAJCAST_DEFINE_ERROR(InsufficientSamplesError, "insufficient-samples")
TRAJCAST_DEFINE_ERROR(IoError, "io")
TRAJCAST_DEFINE_ERROR(IntegrityError, "integrity")
TRAJCAST_DEFINE_ERROR(UnsupportedVersionError, "unsupported-version")
TRAJCAST_DEFINE_ERROR(StageError, "stage")
TRAJCAST_DEFINE_ERROR(RangeError, "range")

#undef TRAJCAST_DEFINE_ERROR

namespace detail {
inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}
}  // namespace detail

}  // namespace trajcast
