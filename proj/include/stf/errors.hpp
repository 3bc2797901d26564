#pragma once

#include <stdexcept>
#include <string>

// Precision-dependent code lives in an inline namespace named after the
// scalar type, so float and double builds can be linked into one program.
#ifdef STF_SINGLE_PRECISION
#define STF_PRECISION_NS p32
#else
#define STF_PRECISION_NS p64
#endif

namespace stf {

inline namespace STF_PRECISION_NS {
#ifdef STF_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif
}  // namespace STF_PRECISION_NS

enum class ErrorKind {
  topology,
  shape,
  config,
  data,
  contract,
  numeric,
  validation,
  unsupported,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::topology: return "topology error";
    case ErrorKind::shape: return "shape error";
    case ErrorKind::config: return "config error";
    case ErrorKind::data: return "data error";
    case ErrorKind::contract: return "contract error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::unsupported: return "unsupported operation";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class KindedError : public Error {
 public:
  explicit KindedError(const std::string& what) : Error(K, what) {}
};

using TopologyError = KindedError<ErrorKind::topology>;
using ShapeError = KindedError<ErrorKind::shape>;
using ConfigError = KindedError<ErrorKind::config>;
using DataError = KindedError<ErrorKind::data>;
using ContractError = KindedError<ErrorKind::contract>;
using NumericError = KindedError<ErrorKind::numeric>;
using ValidationError = KindedError<ErrorKind::validation>;
using UnsupportedError = KindedError<ErrorKind::unsupported>;

}  // namespace stf
