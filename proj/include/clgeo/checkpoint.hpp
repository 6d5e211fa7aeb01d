#pragma once

// Binary checkpoint, little-endian:
//   offset 0   char[4]  magic "CLGK"
//   offset 4   u32      format version (1)
//   offset 8   u64      spec hash
//   offset 16  u32      task index
//   offset 20  u64      seed
//   offset 28  u64      parameter count P
//   offset 36  f64[P]   parameters

#include <cstdint>
#include <string>

#include "clgeo/mlp.hpp"

namespace clgeo {

struct Checkpoint {
    std::uint64_t spec_hash = 0;
    std::uint32_t task_index = 0;
    std::uint64_t seed = 0;
    ParamVector params;
};

inline constexpr std::uint32_t checkpoint_version = 1;

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);
// Loads and verifies the spec hash and parameter count against spec.
Checkpoint load_checkpoint(const std::string& path, const MlpSpec& spec);

}  // namespace clgeo
