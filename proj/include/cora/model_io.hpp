#pragma once

// Container: "CORA" | u32 version | u64 manifest length | JSON manifest |
// little-endian blob | u32 CRC-32 of everything before it.

#include <cstdint>
#include <string>
#include <vector>

#include "cora/convnet.hpp"

namespace cora::io {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Dataset {
  Batch batch;
  std::size_t num_classes = 10;
  std::string split = "validation";  // "calibration" or "validation"
};

Model load_model(const std::string& path);
void save_model(const std::string& path, const Model& model);

/// Only models with hard adapters (or none) can be stored: adapters are kept
/// as their A/B tensors at the chosen ranks.
AdaptedQuantModel load_quantized(const std::string& path);
void save_quantized(const std::string& path, const AdaptedQuantModel& model);

Dataset load_dataset(const std::string& path);
void save_dataset(const std::string& path, const Dataset& data);

/// The manifest's "format" field ("cora-model", "cora-qmodel", "cora-data"),
/// after the same header and checksum validation as the loaders.
std::string peek_format(const std::string& path);

std::vector<std::uint8_t> read_bytes(const std::string& path);
void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace cora::io
