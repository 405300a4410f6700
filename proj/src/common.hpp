#pragma once
#include <stdexcept>
#include <string>

namespace bf {

// Error codes shared by the C API and the CLI exit status.
enum : int {
  ERR_VERIFY = 1,
  ERR_CONFIG = 2,
  ERR_DIVERGED = 3,
  ERR_NOT_JOINED = 4,
  ERR_MODEL_MISMATCH = 5,
  ERR_NOTHING_TO_ANALYZE = 6,
};

struct error : std::runtime_error {
  int code;
  error(int c, const std::string& m) : std::runtime_error(m), code(c) {}
};

}  // namespace bf
