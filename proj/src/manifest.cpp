#include "panfm/manifest.hpp"

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>

#include "panfm/util.hpp"

namespace panfm {

namespace fs = std::filesystem;

std::string content_hash_hex(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  PF_CHECK(f.good(), "manifest: cannot hash missing input ", path);
  std::string data((std::istreambuf_iterator<char>(f)), {});
  char buf[19];
  std::snprintf(buf, sizeof(buf), "fnv1a:%016llx",
                static_cast<unsigned long long>(fnv1a64(data.data(), data.size())));
  return buf;
}

std::string iso8601_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void RunManifest::add_input(const std::string& path) { inputs[path] = content_hash_hex(path); }

void RunManifest::stamp_start() { started_at = iso8601_now(); }
void RunManifest::stamp_end() { finished_at = iso8601_now(); }

void RunManifest::write(const std::string& dir) const {
  fs::create_directories(dir);
  nlohmann::json j{{"command", command}, {"config", config},   {"inputs", inputs},
                   {"seed", seed},       {"started_at", started_at},
                   {"finished_at", finished_at},               {"outputs", outputs}};
  const fs::path final_path = fs::path(dir) / "manifest.json";
  const fs::path tmp_path = fs::path(dir) / ".manifest.json.tmp";
  {
    std::ofstream f(tmp_path);
    PF_CHECK(f.good(), "manifest: cannot write ", tmp_path.string());
    f << j.dump(2) << "\n";
  }
  fs::rename(tmp_path, final_path);
}

}  // namespace panfm
