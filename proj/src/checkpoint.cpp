#include "svp/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace svp {

namespace {

constexpr char kMagic[8] = {'S', 'V', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kPreambleBytes = 24;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void Checkpoint::add(std::string name, Tensor<float> value) {
  if (contains(name)) throw std::invalid_argument("checkpoint: duplicate tensor '" + name + "'");
  names.push_back(std::move(name));
  tensors.push_back(std::move(value));
}

bool Checkpoint::contains(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

const Tensor<float>& Checkpoint::get(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
  return tensors[static_cast<std::size_t>(it - names.begin())];
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string payload;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    entries.push_back({{"name", ckpt.names[i]}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    for (float v : t.values()) put_u32(payload, std::bit_cast<std::uint32_t>(v));
    offset += t.size();
  }
  nlohmann::json header{{"dtype", "f32"},
                        {"payload_bytes", payload.size()},
                        {"payload_crc32", crc32_of(payload.data(), payload.size())},
                        {"tensors", entries},
                        {"meta", ckpt.meta}};
  const std::string text = header.dump();

  std::string blob(kMagic, sizeof kMagic);
  put_u32(blob, kCheckpointVersion);
  put_u32(blob, crc32_of(text.data(), text.size()));
  put_u64(blob, text.size());
  blob += text;
  blob += payload;

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " (" + path.string() + ")";

  if (blob.size() < kPreambleBytes || std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a checkpoint file" + where);
  const auto version = static_cast<std::uint32_t>(get_le(blob, 8, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + where);
  const auto header_crc = static_cast<std::uint32_t>(get_le(blob, 12, 4));
  const std::uint64_t header_len = get_le(blob, 16, 8);
  if (header_len > blob.size() - kPreambleBytes) throw CheckpointError("truncated checkpoint header" + where);
  const std::string text = blob.substr(kPreambleBytes, header_len);
  if (crc32_of(text.data(), text.size()) != header_crc) throw CheckpointError("header checksum mismatch" + where);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what() + where);
  }
  if (header.value("dtype", "") != "f32") throw CheckpointError("unsupported payload dtype" + where);

  const std::size_t payload_pos = kPreambleBytes + header_len;
  const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
  if (blob.size() - payload_pos != payload_bytes) throw CheckpointError("payload size mismatch" + where);
  if (crc32_of(blob.data() + payload_pos, payload_bytes) != header.at("payload_crc32").get<std::uint32_t>())
    throw CheckpointError("payload checksum mismatch" + where);

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& e : header.at("tensors")) {
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (count != shape_numel(shape) || (offset + count) * 4 > payload_bytes)
      throw CheckpointError("bad extent for tensor " + e.at("name").get<std::string>() + where);
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < count; ++i) {
      t[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(blob, payload_pos + 4 * (offset + i), 4)));
    }
    ckpt.add(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace svp
