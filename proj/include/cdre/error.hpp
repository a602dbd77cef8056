#pragma once

#include <stdexcept>
#include <string>

namespace cdre {

// Error categories map onto CLI exit codes (see tools/cdre.cpp).
enum class ErrorKind {
  kInvalidArgument,
  kData,
  kCheckpoint,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error invalid_argument(const std::string& what) {
  return Error(ErrorKind::kInvalidArgument, what);
}

inline Error data_error(const std::string& what) {
  return Error(ErrorKind::kData, what);
}

inline Error checkpoint_error(const std::string& what) {
  return Error(ErrorKind::kCheckpoint, what);
}

} // namespace cdre
