#include "neurofuse/weights.hpp"

#include <set>
#include <sstream>

namespace nf {

namespace {

constexpr uint32_t kWeightVersion = 1;
constexpr uint32_t kMaxRank = 8;

}  // namespace

int64_t WeightRecord::elements() const {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

int64_t WeightRecord::payload_bytes() const { return elements() * (dtype == WeightDType::f32 ? 4 : 1); }

Tensor<float> WeightRecord::to_tensor() const {
  if (dtype == WeightDType::f32) return Tensor<float>(shape, f32);
  Tensor<float> t(shape);
  if (quant_axis < 0) {
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scales[0] * static_cast<float>(i8[i]);
    return t;
  }
  int64_t inner = 1;
  for (size_t a = static_cast<size_t>(quant_axis) + 1; a < shape.size(); ++a) inner *= shape[a];
  const int64_t channels = shape[quant_axis];
  for (int64_t i = 0; i < t.size(); ++i) t[i] = scales[(i / inner) % channels] * static_cast<float>(i8[i]);
  return t;
}

const WeightRecord* WeightFile::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

std::vector<uint8_t> serialize_weights(const WeightFile& file) {
  std::set<std::string> names;
  ByteWriter w;
  w.bytes("BTWF", 4);
  w.u32(kWeightVersion);
  w.u32(static_cast<uint32_t>(file.records.size()));
  for (const auto& r : file.records) {
    if (!names.insert(r.name).second) throw FormatError("BTWF: duplicate tensor name " + r.name);
    const bool q = r.dtype == WeightDType::int8;
    if ((q ? static_cast<int64_t>(r.i8.size()) : static_cast<int64_t>(r.f32.size())) != r.elements()) {
      throw FormatError("BTWF: payload of " + r.name + " does not match its shape");
    }
    w.str(r.name);
    w.u8(static_cast<uint8_t>(r.dtype));
    w.u32(static_cast<uint32_t>(r.shape.size()));
    for (int64_t d : r.shape) w.u64(static_cast<uint64_t>(d));
    w.i32(r.quant_axis);
    w.u32(static_cast<uint32_t>(r.scales.size()));
    for (float s : r.scales) w.f32(s);
    if (q) {
      w.bytes(r.i8.data(), r.i8.size());
    } else {
      for (float v : r.f32) w.f32(v);
    }
  }
  w.seal();
  return w.take();
}

int64_t serialized_size(const WeightFile& file) {
  int64_t n = 4 + 4 + 4 + 4;
  for (const auto& r : file.records) {
    n += 4 + static_cast<int64_t>(r.name.size()) + 1 + 4 + 8 * static_cast<int64_t>(r.shape.size()) + 4 + 4 +
         4 * static_cast<int64_t>(r.scales.size()) + r.payload_bytes();
  }
  return n;
}

WeightFile deserialize_weights(const std::vector<uint8_t>& bytes) {
  ByteReader in(bytes, "BTWF");
  char magic[4];
  in.bytes(magic, 4);
  if (std::string(magic, 4) != "BTWF") throw FormatError("BTWF: bad magic");
  if (const uint32_t v = in.u32(); v != kWeightVersion) {
    throw FormatError("BTWF: unsupported version " + std::to_string(v));
  }
  const uint32_t count = in.u32();
  WeightFile file;
  std::set<std::string> names;
  for (uint32_t i = 0; i < count; ++i) {
    WeightRecord r;
    r.name = in.str();
    if (!names.insert(r.name).second) throw FormatError("BTWF: duplicate tensor name " + r.name);
    const uint8_t dt = in.u8();
    if (dt > 1) throw FormatError("BTWF: unknown dtype code " + std::to_string(dt) + " for " + r.name);
    r.dtype = static_cast<WeightDType>(dt);
    const uint32_t rank = in.u32();
    if (rank > kMaxRank) throw FormatError("BTWF: rank " + std::to_string(rank) + " too large for " + r.name);
    uint64_t elements = 1;
    for (uint32_t a = 0; a < rank; ++a) {
      const uint64_t d = in.u64();
      if (d == 0 || d > in.remaining() || elements * d > in.remaining()) {
        throw FormatError("BTWF: invalid dimension for " + r.name);
      }
      elements *= d;
      r.shape.push_back(static_cast<int64_t>(d));
    }
    r.quant_axis = in.i32();
    const uint32_t nscales = in.u32();
    if (nscales > in.remaining() / 4) throw FormatError("BTWF: truncated payload");
    for (uint32_t s = 0; s < nscales; ++s) r.scales.push_back(in.f32());
    if (r.dtype == WeightDType::int8) {
      const bool per_tensor = r.quant_axis < 0;
      if ((!per_tensor && (r.quant_axis >= static_cast<int32_t>(rank) ||
                           nscales != static_cast<uint32_t>(r.shape[r.quant_axis]))) ||
          (per_tensor && nscales != 1)) {
        throw FormatError("BTWF: scale table of " + r.name + " does not match its quantization axis");
      }
      r.i8.resize(elements);
      in.bytes(r.i8.data(), elements);
    } else {
      if (elements > in.remaining() / 4) throw FormatError("BTWF: truncated payload");
      r.f32.resize(elements);
      for (auto& v : r.f32) v = in.f32();
    }
    file.records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError("BTWF: trailing bytes after the last record");
  return file;
}

WeightFile collect_weights(const ParamRegistry<float>& params) {
  WeightFile file;
  for (const auto& p : params) {
    if (p->value().is_meta()) throw std::invalid_argument("cannot export shape-only parameter " + p->name);
    WeightRecord r;
    r.name = p->name;
    r.shape = p->value().shape();
    r.f32.assign(p->value().data().begin(), p->value().data().end());
    file.records.push_back(std::move(r));
  }
  return file;
}

void load_weights(ParamRegistry<float>& params, const WeightFile& file) {
  std::ostringstream problems;
  std::set<std::string> seen;
  for (const auto& r : file.records) {
    seen.insert(r.name);
    Parameter<float>* p = params.find(r.name);
    if (!p) {
      problems << "\n  " << r.name << ": not a parameter of this network";
    } else if (p->value().shape() != r.shape) {
      problems << "\n  " << r.name << ": file has " << shape_str(r.shape) << ", network expects "
               << shape_str(p->value().shape());
    }
  }
  for (const auto& p : params)
    if (!seen.count(p->name)) problems << "\n  " << p->name << ": missing from weight file";
  if (!problems.str().empty()) throw FormatError("weight file does not match the network:" + problems.str());
  for (const auto& r : file.records) params.find(r.name)->mutable_value() = r.to_tensor();
}

void write_weights(const std::filesystem::path& path, const ParamRegistry<float>& params) {
  write_file(path, serialize_weights(collect_weights(params)));
}

void read_weights(const std::filesystem::path& path, ParamRegistry<float>& params) {
  load_weights(params, deserialize_weights(read_file(path)));
}

}  // namespace nf
