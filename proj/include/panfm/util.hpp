#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace panfm {

template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

[[noreturn]] inline void fail(const std::string& m) { throw std::runtime_error(m); }

// Contract check. Failing a PF_CHECK throws std::runtime_error with the
// concatenated message.
#define PF_CHECK(cond, ...)                          \
  do {                                               \
    if (!(cond)) ::panfm::fail(::panfm::msg(__VA_ARGS__)); \
  } while (0)

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Log verbosity comes from the PANFM_LOG environment variable:
// quiet < info (default) < debug.
enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };
LogLevel log_level();
void log_warn(const std::string& m);
void log_info(const std::string& m);
void log_debug(const std::string& m);

// FNV-1a 64-bit, used for input content hashes in run manifests and for
// keying RNG substreams by purpose string.
uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64(const std::string& s);

}  // namespace panfm
