#pragma once

#include <string>

#include "panfm/optim.hpp"

namespace panfm {

// Shared checkpoint format: a directory with
//   manifest.json  — array of {name, shape, dtype:"f64", offset, length}
//   params.bin     — little-endian IEEE-754 doubles, concatenated in
//                    manifest order
// offset and length are in bytes. Round-trips are bit-exact.

void save_checkpoint(const ParameterStore& params, const std::string& dir);

// Loads values into an existing store; every store entry must be present
// in the checkpoint with the same shape. Entries in the file that the
// store does not declare are ignored.
void load_checkpoint(ParameterStore& params, const std::string& dir);

// Raw read of every entry in a checkpoint (name -> shape, data).
struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};
std::vector<CheckpointEntry> read_checkpoint(const std::string& dir);

}  // namespace panfm
