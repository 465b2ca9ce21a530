#include "panfm/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace panfm {

LogLevel log_level() {
  static LogLevel lvl = [] {
    const char* e = std::getenv("PANFM_LOG");
    if (!e) return LogLevel::Info;
    if (std::strcmp(e, "quiet") == 0) return LogLevel::Quiet;
    if (std::strcmp(e, "debug") == 0) return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return lvl;
}

void log_warn(const std::string& m) {
  if (log_level() >= LogLevel::Info) std::fprintf(stderr, "[warn] %s\n", m.c_str());
}

void log_info(const std::string& m) {
  if (log_level() >= LogLevel::Info) std::fprintf(stderr, "[info] %s\n", m.c_str());
}

void log_debug(const std::string& m) {
  if (log_level() >= LogLevel::Debug) std::fprintf(stderr, "[debug] %s\n", m.c_str());
}

uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace panfm
