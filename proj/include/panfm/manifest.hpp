#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace panfm {

// Written atomically at the end of every CLI run. The config snapshot is
// the fully resolved configuration, sufficient to reproduce the run.
struct RunManifest {
  std::string command;
  nlohmann::json config;                        // resolved snapshot
  std::map<std::string, std::string> inputs;    // path -> content hash
  uint64_t seed = 0;
  std::string started_at, finished_at;          // ISO-8601 UTC
  std::vector<std::string> outputs;

  void add_input(const std::string& path);
  void stamp_start();
  void stamp_end();
  // writes <dir>/manifest.json via a temp file + rename
  void write(const std::string& dir) const;
};

std::string content_hash_hex(const std::string& path);
std::string iso8601_now();

}  // namespace panfm
