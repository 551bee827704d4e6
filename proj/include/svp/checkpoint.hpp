#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "svp/tensor.hpp"

namespace svp {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// On-disk layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "SVPCKPT\0"
//          8   u32       format version (1)
//         12   u32       CRC-32 of the JSON header bytes
//         16   u64       JSON header length in bytes
//         24   ...       JSON header (UTF-8)
//              ...       payload: every tensor as f32 little-endian, in header order
//
// Header keys: "dtype" ("f32"), "payload_bytes", "payload_crc32", "meta" (free
// form: kind, config, schedule, step, ...), and "tensors", a list of
// {name, shape, offset, count} with offsets in elements from payload start.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> names;
  std::vector<Tensor<float>> tensors;

  void add(std::string name, Tensor<float> value);
  bool contains(const std::string& name) const;
  const Tensor<float>& get(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Written to a temporary sibling then renamed into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Validates magic, version, both checksums and tensor extents.
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace svp
