#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "neurofuse/binary_io.hpp"
#include "neurofuse/layers.hpp"
#include "neurofuse/tensor.hpp"

namespace nf {

enum class WeightDType : uint8_t { f32 = 0, int8 = 1 };

/// One named tensor of a "BTWF" container. f32 records fill `f32`; int8
/// records fill `i8` plus `scales` (one per slice of `quant_axis`, or a single
/// scale when the axis is -1).
struct WeightRecord {
  std::string name;
  WeightDType dtype = WeightDType::f32;
  Shape shape;
  std::vector<float> f32;
  std::vector<int8_t> i8;
  int32_t quant_axis = -1;
  std::vector<float> scales;

  int64_t elements() const;
  /// Payload bytes alone, excluding name, dims and scales.
  int64_t payload_bytes() const;
  /// Values as float; int8 records are dequantized.
  Tensor<float> to_tensor() const;
  bool operator==(const WeightRecord&) const = default;
};

struct WeightFile {
  std::vector<WeightRecord> records;

  const WeightRecord* find(const std::string& name) const;
  bool operator==(const WeightFile&) const = default;
};

/// Little-endian layout: "BTWF", u32 version, u32 record count, then per
/// record: u32 name length, name bytes, u8 dtype, u32 rank, u64 dims, i32
/// quant axis, u32 scale count, f32 scales, payload; trailing CRC32.
std::vector<uint8_t> serialize_weights(const WeightFile& file);
WeightFile deserialize_weights(const std::vector<uint8_t>& bytes);

/// Serialized size of a record list, computed without encoding.
int64_t serialized_size(const WeightFile& file);

/// Every parameter and buffer of the registry as f32 records, registry order.
WeightFile collect_weights(const ParamRegistry<float>& params);

/// Copies records into same-named parameters. Missing names, unknown names
/// and shape mismatches are reported together, one line per tensor.
void load_weights(ParamRegistry<float>& params, const WeightFile& file);

void write_weights(const std::filesystem::path& path, const ParamRegistry<float>& params);
void read_weights(const std::filesystem::path& path, ParamRegistry<float>& params);

}  // namespace nf
