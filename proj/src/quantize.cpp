#include "neurofuse/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nf {

namespace {

int64_t inner_extent(const Shape& shape, int32_t axis) {
  int64_t inner = 1;
  for (size_t a = static_cast<size_t>(axis) + 1; a < shape.size(); ++a) inner *= shape[a];
  return inner;
}

bool in_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

bool quantizable(const Parameter<float>& p) { return p.role == ParamRole::weight && !in_head(p.name); }

int64_t record_header_bytes(const std::string& name, size_t rank) {
  return 4 + static_cast<int64_t>(name.size()) + 1 + 4 + 8 * static_cast<int64_t>(rank) + 4 + 4;
}

}  // namespace

float QuantizedTensor::scale_of(int64_t flat_index) const {
  if (axis < 0) return scales[0];
  return scales[(flat_index / inner_extent(shape, axis)) % shape[axis]];
}

Tensor<float> QuantizedTensor::dequantize() const {
  Tensor<float> t(shape);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = scale_of(i) * static_cast<float>(q[i]);
  return t;
}

QuantizedTensor quantize_tensor(const Tensor<float>& t, QuantScheme scheme, int32_t axis) {
  QuantizedTensor out;
  out.shape = t.shape();
  out.scheme = scheme;
  int64_t channels = 1, inner = t.size();
  if (scheme == QuantScheme::per_channel) {
    if (axis < 0 || axis >= static_cast<int32_t>(t.rank())) {
      throw std::invalid_argument("per-channel quantization needs an axis inside " + shape_str(t.shape()));
    }
    out.axis = axis;
    channels = t.dim(axis);
    inner = inner_extent(t.shape(), axis);
  }
  std::vector<float> maxabs(channels, 0.0f);
  for (int64_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (!std::isfinite(v)) throw std::invalid_argument("cannot quantize a non-finite value");
    float& m = maxabs[(i / inner) % channels];
    m = std::max(m, std::abs(v));
  }
  for (float m : maxabs) out.scales.push_back(m > 0 ? m / 127.0f : 1.0f);
  out.q.resize(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) {
    const double s = out.scales[(i / inner) % channels];
    out.q[i] = static_cast<int8_t>(std::clamp(std::round(static_cast<double>(t[i]) / s), -127.0, 127.0));
  }
  return out;
}

WeightRecord to_record(const std::string& name, const QuantizedTensor& qt) {
  WeightRecord r;
  r.name = name;
  r.dtype = WeightDType::int8;
  r.shape = qt.shape;
  r.quant_axis = qt.axis;
  r.scales = qt.scales;
  r.i8 = qt.q;
  return r;
}

QuantizedModel quantize_model(const ParamRegistry<float>& params) {
  QuantizedModel out;
  for (const auto& p : params) {
    if (p->value().is_meta()) throw std::invalid_argument("cannot quantize shape-only parameter " + p->name);
    if (!quantizable(*p)) {
      WeightRecord r;
      r.name = p->name;
      r.shape = p->value().shape();
      r.f32.assign(p->value().data().begin(), p->value().data().end());
      out.weights.records.push_back(std::move(r));
      continue;
    }
    const QuantScheme scheme = p->quant_axis >= 0 ? QuantScheme::per_channel : QuantScheme::per_tensor;
    out.weights.records.push_back(to_record(p->name, quantize_tensor(p->value(), scheme, p->quant_axis)));
    ++out.size.quantized_tensors;
    out.size.quantized_elements += p->size();
  }
  WeightFile q_extractor, f_extractor;
  const WeightFile full = collect_weights(params);
  for (size_t i = 0; i < full.records.size(); ++i) {
    if (in_head(full.records[i].name)) continue;
    q_extractor.records.push_back(out.weights.records[i]);
    f_extractor.records.push_back(full.records[i]);
  }
  out.size.quantized_bytes = serialized_size(q_extractor);
  out.size.f32_bytes = serialized_size(f_extractor);
  return out;
}

SizeReport size_report_from_shapes(const ParamRegistry<float>& params) {
  SizeReport r;
  r.f32_bytes = r.quantized_bytes = 4 + 4 + 4 + 4;
  for (const auto& p : params) {
    if (in_head(p->name)) continue;
    const int64_t header = record_header_bytes(p->name, p->value().rank());
    r.f32_bytes += header + 4 * p->size();
    if (quantizable(*p)) {
      const int64_t nscales = p->quant_axis >= 0 ? p->value().dim(p->quant_axis) : 1;
      r.quantized_bytes += header + 4 * nscales + p->size();
      ++r.quantized_tensors;
      r.quantized_elements += p->size();
    } else {
      r.quantized_bytes += header + 4 * p->size();
    }
  }
  return r;
}

AgreementReport fidelity_check(const FusionClassifier<float>& reference, const FusionClassifier<float>& quantized,
                               const Tensor<float>& images, const TreeEnsemble* head, int64_t batch_size) {
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("fidelity check needs a non-empty image batch");
  if (!head && (!reference.has_head() || !quantized.has_head())) {
    throw std::invalid_argument("fidelity check without an ensemble needs MLP heads");
  }
  NoGradGuard no_grad;
  AgreementReport rep;
  const int64_t N = images.dim(0);
  for (int64_t b = 0; b < N; b += batch_size) {
    const Var<float> x = Var<float>::leaf(slice_batch(images, b, std::min(N, b + batch_size)));
    auto scores = [&](const FusionClassifier<float>& net) {
      ForwardContext<float> ctx;
      ClassifierOutput<float> out = net.forward(x, ctx);
      if (!head) return out.logits.value().cast<double>();
      return gbdt_scores(*head, out.features.value().cast<double>());
    };
    const Tensor<double> a = scores(reference), q = scores(quantized);
    const int64_t rows = a.dim(0), K = a.dim(1);
    for (int64_t i = 0; i < rows; ++i) {
      const double* ra = &a[i * K];
      const double* rq = &q[i * K];
      rep.agreements += std::max_element(ra, ra + K) - ra == std::max_element(rq, rq + K) - rq;
      for (int64_t k = 0; k < K; ++k) rep.max_score_deviation = std::max(rep.max_score_deviation, std::abs(ra[k] - rq[k]));
    }
    rep.samples += rows;
  }
  return rep;
}

}  // namespace nf
