#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/towers.hpp"

namespace dpsr {

// Container layout:
//   "DPSR" | u32 version | u64 metadata length | metadata JSON |
//   float32 tensors in for_each_tensor order, row-major, little-endian.
inline constexpr std::string_view kCheckpointMagic = "DPSR";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TowerParams<float> params;
  std::string vocab_hash;   // hash of the vocabulary the towers were trained with
  nlohmann::json extra = nlohmann::json::object();  // e.g. the training config
};

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json meta;
  meta["config"] = ckpt.params.config;
  meta["vocab_hash"] = ckpt.vocab_hash;
  meta["extra"] = ckpt.extra;
  meta["layout"] = "row-major";
  auto& tensors = meta["tensors"] = nlohmann::json::array();
  for_each_tensor(ckpt.params, [&](const std::string& name, const auto& t) {
    tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}});
  });
  const std::string header = meta.dump();

  io::ByteWriter out;
  out.put_bytes(kCheckpointMagic);
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put<std::uint64_t>(header.size());
  out.put_bytes(header);
  for_each_tensor(ckpt.params, [&](const std::string&, const auto& t) {
    out.put_span(std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
  });
  return out.bytes();
}

inline Checkpoint parse_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  io::ByteReader in(bytes, what);
  require(in.take(4) == kCheckpointMagic, ErrorKind::kCorrupt, what + ": bad magic");
  const auto version = in.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorKind::kVersionMismatch,
          what + ": unsupported version " + std::to_string(version) + " (expected " +
              std::to_string(kCheckpointVersion) + ")");
  const auto header_len = in.get<std::uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in.take(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorrupt, what + ": bad metadata: " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.params = zero_params<float>(meta.at("config").get<TowerConfig>());
    ckpt.vocab_hash = meta.at("vocab_hash").get<std::string>();
    ckpt.extra = meta.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorrupt, what + ": bad metadata: " + e.what());
  }
  const auto& tensors = meta.at("tensors");
  std::size_t i = 0;
  for_each_tensor(ckpt.params, [&](const std::string& name, auto& t) {
    require(i < tensors.size(), ErrorKind::kCorrupt, what + ": missing tensor " + name);
    const auto& entry = tensors[i++];
    require(entry.at("name") == name, ErrorKind::kCorrupt,
            what + ": tensor order mismatch at " + name);
    require(entry.at("shape")[0] == t.rows() && entry.at("shape")[1] == t.cols(),
            ErrorKind::kDimensionMismatch, what + ": shape mismatch for " + name);
    in.get_into(std::span<float>(t.data(), static_cast<std::size_t>(t.size())));
  });
  require(i == tensors.size(), ErrorKind::kCorrupt, what + ": unexpected extra tensors");
  in.expect_end();
  require(all_finite(ckpt.params), ErrorKind::kNumeric, what + ": non-finite parameters");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path), path.string());
}

}  // namespace dpsr
