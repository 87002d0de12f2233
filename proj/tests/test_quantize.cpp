#include <cmath>
#include <random>

#include "doctest.h"
#include "neurofuse/quantize.hpp"

using namespace nf;

namespace {

Tensor<float> random_tensor(std::mt19937_64& rng, Shape shape, float spread) {
  std::normal_distribution<float> nd(0, spread);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

// Replaces every quantizable weight by exact multiples of a power-of-two scale,
// with +-127 present in each channel so the derived scale is that power of two.
void make_scale_exact(FusionClassifier<float>& net, std::mt19937_64& rng) {
  for (auto& p : net.params()) {
    if (p->role != ParamRole::weight || p->name.rfind("head.", 0) == 0) continue;
    Tensor<float>& w = p->mutable_value();
    const float s = std::ldexp(1.0f, -9);
    for (auto& v : w.data()) v = s * static_cast<float>(static_cast<int>(rng() % 255) - 127);
    const Shape& shape = w.shape();
    if (p->quant_axis < 0) {
      w[0] = 127 * s;
      continue;
    }
    int64_t inner = 1;
    for (size_t a = p->quant_axis + 1; a < shape.size(); ++a) inner *= shape[a];
    for (int64_t c = 0; c < shape[p->quant_axis]; ++c) w[c * inner] = -127 * s;
  }
}

}  // namespace

TEST_CASE("quantize_tensor worked example") {
  QuantizedTensor q = quantize_tensor(Tensor<float>({3}, std::vector<float>{-1.0f, 0.5f, 1.0f}), QuantScheme::per_tensor);
  REQUIRE(q.scales.size() == 1);
  CHECK(q.scales[0] == doctest::Approx(1.0 / 127).epsilon(1e-7));
  CHECK(q.q == std::vector<int8_t>{-127, 64, 127});
}

TEST_CASE("halves round away from zero") {
  // Scale 1 exactly: max 127.
  QuantizedTensor q = quantize_tensor(Tensor<float>({4}, std::vector<float>{127.0f, 2.5f, -2.5f, -0.5f}),
                                      QuantScheme::per_tensor);
  CHECK(q.scales[0] == 1.0f);
  CHECK(q.q == std::vector<int8_t>{127, 3, -3, -1});
}

TEST_CASE("all-zero tensor and zero channels use scale 1") {
  QuantizedTensor z = quantize_tensor(Tensor<float>({2, 3}), QuantScheme::per_tensor);
  CHECK(z.scales == std::vector<float>{1.0f});
  CHECK(z.q == std::vector<int8_t>(6, 0));
  Tensor<float> t({2, 2}, std::vector<float>{0.0f, 2.0f, 0.0f, -4.0f});
  QuantizedTensor c = quantize_tensor(t, QuantScheme::per_channel, 1);
  CHECK(c.scales[0] == 1.0f);
  CHECK(c.scales[1] == doctest::Approx(4.0 / 127));
  CHECK(c.q == std::vector<int8_t>{0, 64, 0, -127});
}

TEST_CASE("non-finite values and bad axes are rejected") {
  CHECK_THROWS_AS(quantize_tensor(Tensor<float>({2}, std::vector<float>{1.0f, NAN}), QuantScheme::per_tensor),
                  std::invalid_argument);
  CHECK_THROWS_AS(quantize_tensor(Tensor<float>({2, 2}), QuantScheme::per_channel, 2), std::invalid_argument);
}

TEST_CASE("round-trip error is within scale/2 on 1000 random tensors") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    Shape shape;
    const int rank = 1 + static_cast<int>(rng() % 4);
    for (int a = 0; a < rank; ++a) shape.push_back(1 + static_cast<int64_t>(rng() % 6));
    const float spread = std::ldexp(1.0f, static_cast<int>(rng() % 20) - 10);
    Tensor<float> t = random_tensor(rng, shape, spread);
    const bool per_channel = rng() % 2;
    const int32_t axis = per_channel ? static_cast<int32_t>(rng() % rank) : -1;
    QuantizedTensor q = quantize_tensor(t, per_channel ? QuantScheme::per_channel : QuantScheme::per_tensor, axis);
    CHECK(static_cast<int64_t>(q.q.size()) == t.size());
    Tensor<float> back = q.dequantize();
    bool ok = true;
    for (int64_t i = 0; i < t.size(); ++i) {
      const double s = q.scale_of(i);
      ok &= q.scale_of(i) > 0;
      ok &= std::abs(static_cast<double>(t[i]) - s * q.q[i]) <= s / 2;
      ok &= std::abs(q.q[i]) <= 127;
    }
    INFO("trial " << trial);
    CHECK(ok);
  }
}

TEST_CASE("quantization is idempotent at the int8 level") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<float> t = random_tensor(rng, {3, 3, 4, 5}, 0.3f);
    const QuantScheme scheme = trial % 2 ? QuantScheme::per_channel : QuantScheme::per_tensor;
    QuantizedTensor a = quantize_tensor(t, scheme, 3);
    QuantizedTensor b = quantize_tensor(a.dequantize(), scheme, 3);
    CHECK(a.q == b.q);
  }
}

TEST_CASE("quantized model: schemes, f32 leftovers and serialization") {
  ClassifierConfig cfg = ClassifierConfig::preset(Preset::tiny);
  FusionClassifier<float> net(cfg, {3, true});
  QuantizedModel qm = quantize_model(net.params());
  for (const auto& r : qm.weights.records) {
    const Parameter<float>* p = net.params().find(r.name);
    REQUIRE(p);
    const bool head = r.name.rfind("head.", 0) == 0;
    if (p->role == ParamRole::weight && !head) {
      CHECK(r.dtype == WeightDType::int8);
      CHECK(r.quant_axis == p->quant_axis);
    } else {
      CHECK(r.dtype == WeightDType::f32);
    }
  }
  const auto bytes = serialize_weights(qm.weights);
  WeightFile back = deserialize_weights(bytes);
  CHECK(back == qm.weights);
  // Loading dequantizes; quantizing the loaded model reproduces the payloads.
  FusionClassifier<float> loaded(cfg, {4, true});
  load_weights(loaded.params(), back);
  QuantizedModel again = quantize_model(loaded.params());
  for (size_t i = 0; i < back.records.size(); ++i) CHECK(again.weights.records[i].i8 == back.records[i].i8);
  CHECK(qm.size.ratio() >= 3.5);
  MESSAGE("tiny extractor: f32 " << qm.size.f32_bytes << " B, int8 " << qm.size.quantized_bytes
                                 << " B, fraction " << qm.size.fraction());
}

TEST_CASE("shape-only size report matches the serialized one") {
  ClassifierConfig cfg = ClassifierConfig::preset(Preset::tiny);
  FusionClassifier<float> net(cfg, {3, true}), meta(cfg, {3, false});
  const SizeReport a = quantize_model(net.params()).size, b = size_report_from_shapes(meta.params());
  CHECK(a.f32_bytes == b.f32_bytes);
  CHECK(a.quantized_bytes == b.quantized_bytes);
  CHECK(a.quantized_elements == b.quantized_elements);
}

TEST_CASE("paper-scale extractor compresses by about 3.92") {
  FusionClassifier<float> net(ClassifierConfig::preset(Preset::paper), {1, false});
  const SizeReport r = size_report_from_shapes(net.params());
  MESSAGE("paper extractor: f32 " << r.f32_bytes << " B, int8 " << r.quantized_bytes << " B, ratio " << r.ratio());
  CHECK(r.ratio() == doctest::Approx(289.45 / 73.88).epsilon(0.01));
  CHECK(r.fraction() <= 0.28);
}

TEST_CASE("scale-exact weights give perfect fidelity") {
  ClassifierConfig cfg = ClassifierConfig::preset(Preset::tiny);
  std::mt19937_64 rng(8);
  FusionClassifier<float> ref(cfg, {5, true}), q(cfg, {6, true});
  make_scale_exact(ref, rng);
  load_weights(q.params(), quantize_model(ref.params()).weights);
  for (const auto& p : ref.params()) CHECK(q.params().find(p->name)->value() == p->value());
  Tensor<float> images = random_tensor(rng, {10, 64, 64, 1}, 1.0f);
  AgreementReport rep = fidelity_check(ref, q, images, nullptr, 4);
  CHECK(rep.samples == 10);
  CHECK(rep.agreement() == 1.0);
  CHECK(rep.max_score_deviation == 0.0);
}

TEST_CASE("fidelity check rejects an empty set") {
  ClassifierConfig cfg = ClassifierConfig::preset(Preset::tiny);
  FusionClassifier<float> a(cfg, {1, true});
  CHECK_THROWS_AS(fidelity_check(a, a, Tensor<float>()), std::invalid_argument);
}
