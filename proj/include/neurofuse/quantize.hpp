#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neurofuse/architecture.hpp"
#include "neurofuse/gbdt.hpp"
#include "neurofuse/weights.hpp"

namespace nf {

enum class QuantScheme { per_tensor, per_channel };

/// Symmetric signed 8-bit tensor: value = scale[c] * q, no zero point.
struct QuantizedTensor {
  Shape shape;
  QuantScheme scheme = QuantScheme::per_tensor;
  int32_t axis = -1;  // channel axis for per-channel
  std::vector<int8_t> q;
  std::vector<float> scales;

  Tensor<float> dequantize() const;
  float scale_of(int64_t flat_index) const;
};

/// scale = max|w| / 127 over the tensor or each slice of `axis`; all-zero
/// slices get scale 1; q = clamp(round(w / scale), -127, 127) with halves
/// rounded away from zero.
QuantizedTensor quantize_tensor(const Tensor<float>& t, QuantScheme scheme, int32_t axis = -1);

WeightRecord to_record(const std::string& name, const QuantizedTensor& qt);

struct SizeReport {
  int64_t f32_bytes = 0;
  int64_t quantized_bytes = 0;
  int64_t quantized_tensors = 0;
  int64_t quantized_elements = 0;
  double ratio() const { return quantized_bytes > 0 ? static_cast<double>(f32_bytes) / quantized_bytes : 0.0; }
  double fraction() const { return f32_bytes > 0 ? static_cast<double>(quantized_bytes) / f32_bytes : 0.0; }
};

struct QuantizedModel {
  WeightFile weights;
  SizeReport size;
};

/// Extractor weight tensors become int8 (per-channel along the registered
/// output-channel axis for convolutions, per-tensor for dense layers); biases,
/// batch-norm parameters, running statistics and the MLP head stay f32. The
/// size report compares serialized extractor bytes (head records excluded).
QuantizedModel quantize_model(const ParamRegistry<float>& params);

/// The same extractor size report computed from shapes only, for networks
/// built without materialized weights.
SizeReport size_report_from_shapes(const ParamRegistry<float>& params);

struct AgreementReport {
  int64_t samples = 0;
  int64_t agreements = 0;
  double max_score_deviation = 0;
  double agreement() const { return samples ? static_cast<double>(agreements) / samples : 0.0; }
};

/// Compares top-1 decisions and raw scores of two networks over a batch of
/// images [N, H, W, C]. With `head`, scores are the ensemble's class scores
/// on each network's features; otherwise the MLP logits.
AgreementReport fidelity_check(const FusionClassifier<float>& reference, const FusionClassifier<float>& quantized,
                               const Tensor<float>& images, const TreeEnsemble* head = nullptr,
                               int64_t batch_size = 32);

}  // namespace nf
