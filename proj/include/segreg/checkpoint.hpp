#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "segreg/segnet.hpp"

namespace segreg {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

// Appends values as little-endian IEEE-754 binary32.
inline void append_f32_le(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
}

inline std::vector<float> read_f32_le(const char* bytes, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

/// Serialises parameters: one line of JSON header, then the concatenated
/// little-endian float32 payload. Offsets in the header are relative to the
/// first payload byte.
inline std::string encode_checkpoint(const ModelParams<float>& params) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    manifest.push_back({{"name", params.names[i]}, {"shape", params.tensors[i].shape()}, {"offset", payload.size()}});
    detail::append_f32_le(payload, params.tensors[i].data());
  }
  nlohmann::json header = {
      {"format", "segreg-checkpoint"},
      {"format_version", kCheckpointVersion},
      {"channel_plan", params.plan.widths},
      {"in_channels", params.plan.in_channels},
      {"num_classes", params.num_classes},
      {"latent_dim", params.plan.latent_dim()},
      {"parameters", manifest},
      {"payload_bytes", payload.size()},
  };
  return header.dump() + "\n" + payload;
}

inline ModelParams<float> decode_checkpoint(const std::string& bytes) {
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) throw IoError("checkpoint: missing header terminator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (header.value("format", "") != "segreg-checkpoint" || header.value("format_version", 0) != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported format or version");
  }
  const char* payload = bytes.data() + newline + 1;
  const std::size_t payload_size = bytes.size() - newline - 1;
  if (header.at("payload_bytes").get<std::size_t>() != payload_size) throw IoError("checkpoint: truncated payload");

  ModelParams<float> p;
  p.plan.widths = header.at("channel_plan").get<std::array<std::size_t, 5>>();
  p.plan.in_channels = header.at("in_channels").get<std::size_t>();
  p.num_classes = header.at("num_classes").get<std::size_t>();
  const auto expected = layer_specs(p.plan, p.num_classes);
  const auto& entries = header.at("parameters");
  if (entries.size() != 2 * expected.size()) throw IoError("checkpoint: parameter manifest does not match channel plan");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + 4 * n > payload_size) throw IoError("checkpoint: parameter extends past payload");
    const auto& layer = expected[i / 2];
    const Shape want = i % 2 == 0 ? Shape{layer.out, layer.in, layer.kernel, layer.kernel} : Shape{layer.out};
    if (shape != want) throw IoError("checkpoint: unexpected shape for " + e.at("name").get<std::string>());
    p.names.push_back(e.at("name").get<std::string>());
    p.tensors.emplace_back(std::move(shape), detail::read_f32_le(payload + offset, n), true);
  }
  return p;
}

inline void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(params));
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace segreg
