#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "optim.hpp"

// Checkpoint layout (version 1):
//
//   bytes 0..7    magic "VMAPCKPT"
//   u32 LE        format version
//   u64 LE        manifest length in bytes
//   manifest      UTF-8 JSON: {"version", "dtype": "f64le", "config": {...},
//                 "meta": {...}, "params": [{"name", "shape", "offset", "count"}]}
//   payload       little-endian IEEE-754 doubles; `offset` counts doubles from
//                 the start of the payload
//
// Files are written to "<path>.tmp" and renamed into place.

namespace vmap {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'V', 'M', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof v];
    std::memcpy(b, &v, sizeof v);
    std::reverse(b, b + sizeof v);
    std::memcpy(&v, b, sizeof v);
  }
  return v;
}

template <typename U>
void write_le(std::ostream& os, U v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U read_le(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return to_little(v);
}

}  // namespace detail

struct CheckpointData {
  nlohmann::json config;
  nlohmann::json meta;
  std::vector<std::string> names;
  std::vector<ad::Shape> shapes;
  std::vector<std::vector<double>> values;
};

inline void save_checkpoint(const std::filesystem::path& path, const ad::ParamStore& params,
                            const nlohmann::json& config, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "f64le";
  manifest["config"] = config;
  manifest["meta"] = meta;
  manifest["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.entries()) {
    manifest["params"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
  }
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, t] : params.entries()) {
      for (double v : t.values()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::read_le<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError("truncated manifest in " + path.string());
  const auto manifest = nlohmann::json::parse(text);

  CheckpointData out;
  out.config = manifest.at("config");
  out.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& p : manifest.at("params")) {
    out.names.push_back(p.at("name").get<std::string>());
    out.shapes.push_back(p.at("shape").get<ad::Shape>());
    const auto count = p.at("count").get<std::size_t>();
    std::vector<double> vals(count);
    for (auto& v : vals) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
    if (!is) throw CheckpointError("truncated payload for parameter '" + out.names.back() + "'");
    out.values.push_back(std::move(vals));
  }
  return out;
}

/// Copies checkpoint values into an already-built parameter store; names and
/// shapes must match exactly.
inline void load_into(const CheckpointData& ck, ad::ParamStore& params) {
  if (ck.names.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ck.names.size()) + " parameters, model has " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    if (!params.contains(ck.names[i])) throw CheckpointError("unknown parameter '" + ck.names[i] + "'");
    auto t = params.get(ck.names[i]);
    if (t.shape() != ck.shapes[i]) {
      throw CheckpointError("shape mismatch for '" + ck.names[i] + "': " + ad::shape_str(ck.shapes[i]) + " vs " +
                            ad::shape_str(t.shape()));
    }
    std::copy(ck.values[i].begin(), ck.values[i].end(), t.mutable_values().begin());
  }
}

}  // namespace vmap
