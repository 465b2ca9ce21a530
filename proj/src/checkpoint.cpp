#include "panfm/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "panfm/util.hpp"

namespace panfm {

namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(const ParameterStore& params, const std::string& dir) {
  fs::create_directories(dir);
  json manifest = json::array();
  uint64_t offset = 0;
  for (const auto& e : params.entries) {
    const uint64_t bytes = static_cast<uint64_t>(e.tensor.numel()) * sizeof(double);
    manifest.push_back({{"name", e.name},
                        {"shape", e.tensor.shape()},
                        {"dtype", "f64"},
                        {"offset", offset},
                        {"length", bytes}});
    offset += bytes;
  }
  {
    std::ofstream mf(fs::path(dir) / "manifest.json");
    PF_CHECK(mf.good(), "checkpoint: cannot write manifest in ", dir);
    mf << manifest.dump(2) << "\n";
  }
  std::ofstream bf(fs::path(dir) / "params.bin", std::ios::binary);
  PF_CHECK(bf.good(), "checkpoint: cannot write params.bin in ", dir);
  for (const auto& e : params.entries) {
    auto d = e.tensor.data();
    bf.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  PF_CHECK(bf.good(), "checkpoint: short write in ", dir);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  PF_CHECK(mf.good(), "checkpoint: missing manifest.json in ", dir);
  json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    fail(msg("checkpoint: bad manifest.json in ", dir, ": ", e.what()));
  }
  std::ifstream bf(fs::path(dir) / "params.bin", std::ios::binary);
  PF_CHECK(bf.good(), "checkpoint: missing params.bin in ", dir);

  std::vector<CheckpointEntry> out;
  for (const auto& item : manifest) {
    CheckpointEntry e;
    e.name = item.at("name").get<std::string>();
    e.shape = item.at("shape").get<std::vector<int>>();
    PF_CHECK(item.at("dtype").get<std::string>() == "f64", "checkpoint: entry '", e.name,
             "' has unsupported dtype");
    const uint64_t offset = item.at("offset").get<uint64_t>();
    const uint64_t length = item.at("length").get<uint64_t>();
    PF_CHECK(length % sizeof(double) == 0, "checkpoint: entry '", e.name,
             "' length not a multiple of 8");
    int64_t numel = 1;
    for (int d : e.shape) numel *= d;
    PF_CHECK(static_cast<uint64_t>(numel) * sizeof(double) == length, "checkpoint: entry '",
             e.name, "' shape/length mismatch");
    e.data.resize(length / sizeof(double));
    bf.seekg(static_cast<std::streamoff>(offset));
    bf.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(length));
    PF_CHECK(bf.good(), "checkpoint: short read for entry '", e.name, "' in ", dir);
    out.push_back(std::move(e));
  }
  return out;
}

void load_checkpoint(ParameterStore& params, const std::string& dir) {
  auto entries = read_checkpoint(dir);
  for (auto& e : params.entries) {
    const CheckpointEntry* found = nullptr;
    for (const auto& c : entries)
      if (c.name == e.name) {
        found = &c;
        break;
      }
    PF_CHECK(found, "checkpoint: parameter '", e.name, "' not present in ", dir);
    PF_CHECK(found->shape == e.tensor.shape(), "checkpoint: parameter '", e.name,
             "' shape mismatch: store ", shape_str(e.tensor.shape()), " vs file ",
             shape_str(found->shape));
    auto dst = e.tensor.data_mut();
    std::copy(found->data.begin(), found->data.end(), dst.begin());
  }
}

}  // namespace panfm
