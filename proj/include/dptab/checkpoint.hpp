#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "DPTT" | u16 version | u32 header length | UTF-8 JSON header |
//   float32 payload | u64 FNV-1a checksum of the payload bytes
//
// The header carries the model config, PEFT metadata, an optional dataset
// schema and the parameter manifest (name, shape, byte offset, trainable).

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dptab/config.hpp"
#include "dptab/data.hpp"
#include "dptab/error.hpp"
#include "dptab/model.hpp"
#include "dptab/rng.hpp"

namespace dptab {

inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'T', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct LoadedCheckpoint {
  Model model;
  std::optional<DatasetSchema> schema;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::uint64_t payload_checksum(std::string_view bytes) { return fnv1a(bytes); }

inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m, const std::optional<DatasetSchema>& schema = std::nullopt) {
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const Parameter& p : m.parameters()) {
    nlohmann::json e{{"name", p.name},
                     {"shape", p.value.shape().to_vector()},
                     {"offset", offset},
                     {"trainable", p.trainable},
                     {"tuned_rows", p.tuned_rows ? nlohmann::json(*p.tuned_rows) : nlohmann::json(nullptr)}};
    manifest.push_back(std::move(e));
    offset += p.value.size() * sizeof(float);
  }
  nlohmann::json header{{"config", m.config()},
                        {"peft", m.peft()},
                        {"lora_merged", m.lora_merged()},
                        {"parameters", std::move(manifest)},
                        {"payload_bytes", offset}};
  if (schema) header["schema"] = *schema;
  const std::string header_text = header.dump();

  std::string payload;
  payload.reserve(offset);
  for (const Parameter& p : m.parameters())
    payload.append(reinterpret_cast<const char*>(p.value.data().data()), p.value.size() * sizeof(float));

  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint16_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  out += payload;
  detail::put<std::uint64_t>(out, detail::payload_checksum(payload));
  return out;
}

inline LoadedCheckpoint deserialize_checkpoint(const std::string& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 4) throw CheckpointError(Kind::kTruncated, "checkpoint truncated");
  if (bytes.compare(0, 4, kCheckpointMagic, 4) != 0) throw CheckpointError(Kind::kBadMagic, "not a DPTT checkpoint");
  std::size_t pos = 4;
  const auto version = detail::get<std::uint16_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::kVersionMismatch, "checkpoint format version " + std::to_string(version) +
                                                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto header_len = detail::get<std::uint32_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw CheckpointError(Kind::kTruncated, "checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  pos += header_len;

  try {
    const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (pos + payload_bytes + sizeof(std::uint64_t) > bytes.size())
      throw CheckpointError(Kind::kTruncated, "checkpoint payload truncated");
    const std::string_view payload(bytes.data() + pos, payload_bytes);
    std::size_t tail = pos + payload_bytes;
    const auto stored = detail::get<std::uint64_t>(bytes, tail);
    if (stored != detail::payload_checksum(payload))
      throw CheckpointError(Kind::kDigestMismatch, "checkpoint payload checksum mismatch");

    Model m(header.at("config").get<ModelConfig>());
    m.peft() = header.at("peft").get<PeftConfig>();
    m.set_lora_merged(header.at("lora_merged").get<bool>());
    for (const auto& e : header.at("parameters")) {
      const auto dims = e.at("shape").get<std::vector<std::size_t>>();
      Shape shape(dims.begin(), dims.end());
      const auto offset = e.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (offset + n * sizeof(float) > payload_bytes)
        throw CheckpointError(Kind::kMalformed, "parameter " + e.at("name").get<std::string>() + " exceeds payload");
      std::vector<float> data(n);
      std::memcpy(data.data(), payload.data() + offset, n * sizeof(float));
      Parameter p{e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)), e.at("trainable").get<bool>(),
                  std::nullopt};
      if (!e.at("tuned_rows").is_null()) p.tuned_rows = e.at("tuned_rows").get<std::size_t>();
      m.add_parameter(std::move(p));
    }
    LoadedCheckpoint out{std::move(m), std::nullopt};
    if (header.contains("schema")) out.schema = header.at("schema").get<DatasetSchema>();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kMalformed, std::string("checkpoint header is missing fields: ") + e.what());
  }
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path,
                            const std::optional<DatasetSchema>& schema = std::nullopt) {
  detail::write_atomically(path, serialize_checkpoint(m, schema));
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

/// Hex digest of a whole checkpoint file, for reproducibility checks.
inline std::string file_digest(const std::filesystem::path& path) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(detail::read_file(path))));
  return buf;
}

}  // namespace dptab
