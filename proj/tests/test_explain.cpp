#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "neurofuse/explain.hpp"
#include "support/oracles.hpp"

using namespace nf;
using nf::testing::random_tensor;
using nf::testing::relative_error;

namespace {

FusionClassifier<double> tiny_net(uint64_t seed) {
  FusionClassifier<double> net(ClassifierConfig::preset(Preset::tiny, 3), InitOptions{seed, true});
  std::mt19937_64 rng(seed + 100);
  std::uniform_real_distribution<double> d(0.5, 1.5);
  for (auto& p : net.params())
    if (p->is_buffer())
      for (double& v : p->mutable_value().data()) v = p->role == ParamRole::running_var ? d(rng) : d(rng) - 1;
  return net;
}

Heatmap gap_cam(const Tensor<double>& a, double seed_value) {
  Var<double> leaf = Var<double>::leaf(a, true);
  Var<double> pooled = ops::global_avg_pool(leaf);
  Tensor<double> seed(pooled.shape());
  seed[0] = seed_value;
  backward(pooled, seed);
  return cam_from_gradients(a, leaf.grad(), 20, 20);
}

}  // namespace

TEST_CASE("score = GAP of channel 0 gives relu(A_0) normalized") {
  std::mt19937_64 rng(1);
  Tensor<double> a = random_tensor<double>({1, 5, 4, 6}, rng, -1, 1);
  const Heatmap hm = gap_cam(a, 1.0);
  double peak = 0;
  for (int64_t p = 0; p < 20; ++p) peak = std::max(peak, a[p * 6]);
  REQUIRE(peak > 0);
  REQUIRE(hm.grid.size() == 20);
  CHECK(hm.grid_height == 5);
  CHECK(hm.grid_width == 4);
  for (int64_t p = 0; p < 20; ++p) CHECK(hm.grid[p] == doctest::Approx(std::max(a[p * 6], 0.0) / peak).epsilon(1e-14));
}

TEST_CASE("all-negative weighting gives an all-zero map") {
  std::mt19937_64 rng(2);
  Tensor<double> a = random_tensor<double>({1, 6, 6, 3}, rng, 0.1, 1);
  const Heatmap hm = gap_cam(a, -1.0);
  for (double v : hm.grid) CHECK(v == 0.0);
  for (double v : hm.upsampled) CHECK(v == 0.0);
  CHECK(hm.upsampled.size() == 400);
}

TEST_CASE("bilinear upsampling") {
  std::vector<double> out = upsample_bilinear({0, 1, 0, 1}, 2, 2, 4, 4);
  for (int r = 0; r < 4; ++r) {
    CHECK(out[r * 4 + 0] == 0.0);
    CHECK(out[r * 4 + 1] == 0.25);
    CHECK(out[r * 4 + 2] == 0.75);
    CHECK(out[r * 4 + 3] == 1.0);
  }
  std::vector<double> grid{0.1, 0.7, 0.3, 0.9, 0.2, 0.4};
  CHECK(upsample_bilinear(grid, 2, 3, 2, 3) == grid);
  for (double v : upsample_bilinear({0.6}, 1, 1, 7, 3)) CHECK(v == 0.6);
  CHECK_THROWS_AS(upsample_bilinear({1, 2}, 2, 2, 4, 4), std::invalid_argument);
}

TEST_CASE("grad_cam gradients match finite differences of the target activation") {
  FusionClassifier<double> net = tiny_net(3);
  std::mt19937_64 rng(4);
  const Tensor<double> x = random_tensor<double>({1, 64, 64, 1}, rng, 0, 1);
  const std::string layer = FusionClassifier<double>::kPointwiseLayer;
  const int cls = 1;

  std::map<std::string, Var<double>> cap;
  ForwardContext<double> ctx;
  ctx.watch = layer;
  ctx.captures = &cap;
  auto out = net.forward(Var<double>::leaf(x), ctx);
  Tensor<double> seed(out.logits.shape());
  seed[cls] = 1;
  backward(out.logits, seed);
  const Tensor<double> act = cap.at(layer).value();
  const Tensor<double> grad = cap.at(layer).grad();

  auto score = [&](int64_t index, double delta) {
    ForwardContext<double> c;
    c.hook = [&](const std::string& name, const Var<double>& v) {
      if (name != layer) return v;
      Tensor<double> offset(v.shape());
      offset[index] = delta;
      return ops::add(v, Var<double>::leaf(offset));
    };
    return net.forward(Var<double>::leaf(x), c).logits.value()[cls];
  };
  std::vector<double> analytic, numeric;
  const double h = 1e-5;
  for (int s = 0; s < 48; ++s) {
    const int64_t i = static_cast<int64_t>(rng() % act.size());
    analytic.push_back(grad[i]);
    numeric.push_back((score(i, h) - score(i, -h)) / (2 * h));
  }
  const double err = relative_error(analytic, numeric);
  MESSAGE("Grad-CAM target gradient relative error " << err);
  CHECK(err <= 1e-3);

  // grad_cam reproduces the map built from these gradients.
  const Heatmap expected = cam_from_gradients(act, grad, 64, 64);
  const Heatmap hm = grad_cam(net, x, cls);
  CHECK(hm.grid_height == 8);
  CHECK(hm.height == 64);
  CHECK(hm.class_index == cls);
  for (size_t i = 0; i < hm.grid.size(); ++i) CHECK(hm.grid[i] == doctest::Approx(expected.grid[i]).epsilon(1e-12));
}

TEST_CASE("heatmap is invariant to scaling the logits by 3") {
  FusionClassifier<double> net = tiny_net(5);
  std::mt19937_64 rng(6);
  const Tensor<double> x = random_tensor<double>({64, 64, 1}, rng, 0, 1);
  for (int cls = 0; cls < 3; ++cls) {
    const Heatmap a = grad_cam(net, x, cls);
    const Dense<double>* head = net.head_output();
    for (double& v : head->weight()->mutable_value().data()) v *= 3;
    for (double& v : head->bias()->mutable_value().data()) v *= 3;
    const Heatmap b = grad_cam(net, x, cls);
    for (double& v : head->weight()->mutable_value().data()) v /= 3;
    for (double& v : head->bias()->mutable_value().data()) v /= 3;
    double worst = 0;
    for (size_t i = 0; i < a.upsampled.size(); ++i) worst = std::max(worst, std::abs(a.upsampled[i] - b.upsampled[i]));
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("grad_cam leaves parameters untouched and validates its inputs") {
  FusionClassifier<double> net = tiny_net(7);
  std::mt19937_64 rng(8);
  const Tensor<double> x = random_tensor<double>({1, 64, 64, 1}, rng, 0, 1);
  std::map<std::string, bool> trainable;
  for (auto& p : net.params()) trainable[p->name] = p->trainable();
  const Heatmap hm = grad_cam(net, x, 0, "vgg.block3.conv1");
  CHECK(hm.grid_height == 16);
  for (auto& p : net.params()) {
    CHECK(p->trainable() == trainable[p->name]);
    CHECK_FALSE(p->var.has_grad());
  }
  for (double v : hm.upsampled) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(grad_cam(net, x, 0, "fusion.bn"), std::invalid_argument);
  CHECK_THROWS_AS(grad_cam(net, x, 0, "no.such.layer"), std::invalid_argument);
  CHECK_THROWS_AS(grad_cam(net, x, 3), std::out_of_range);
  CHECK_THROWS_AS(grad_cam(net, random_tensor<double>({2, 64, 64, 1}, rng), 0), ShapeError);
}

TEST_CASE("jet colormap endpoints") {
  CHECK(jet_color(0.0) == std::array<uint8_t, 3>{0, 0, 128});
  CHECK(jet_color(0.5) == std::array<uint8_t, 3>{128, 255, 128});
  CHECK(jet_color(1.0) == std::array<uint8_t, 3>{128, 0, 0});
  CHECK(jet_color(-3.0) == jet_color(0.0));
}

TEST_CASE("overlay blending") {
  std::mt19937_64 rng(9);
  Image img(13, 21, 1);
  for (auto& v : img.pixels) v = static_cast<uint8_t>(rng() % 256);
  Heatmap hm;
  hm.grid_height = 3;
  hm.grid_width = 2;
  hm.grid = {0.0, 0.2, 0.5, 0.9, 1.0, 0.4};

  const Image same = overlay(img, hm, 0.0);
  REQUIRE(same.channels == 3);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < 3; ++ch) CHECK(same.at(r, c, ch) == img.at(r, c));

  hm.grid.assign(6, 0.0);
  const Image tinted = overlay(img, hm, 0.4);
  const auto cold = jet_color(0.0);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < 3; ++ch) CHECK(tinted.at(r, c, ch) == std::lround(0.6 * img.at(r, c) + 0.4 * cold[ch]));

  for (auto [h, w] : {std::pair{1, 1}, std::pair{7, 300}, std::pair{64, 64}, std::pair{129, 5}}) {
    const Image o = overlay(Image(h, w, 3, 77), hm);
    CHECK(o.height == h);
    CHECK(o.width == w);
  }
}

TEST_CASE("localization IoU of the top-quartile region") {
  Heatmap hm;
  hm.height = 2;
  hm.width = 4;
  hm.upsampled = {0.1, 0.8, 1.0, 0.75, 0.0, 0.74, 0.9, 0.2};
  Image mask(2, 4, 1);
  mask.at(0, 2) = mask.at(1, 2) = mask.at(1, 3) = 255;
  // Region {(0,1),(0,2),(0,3),(1,2)}, mask {(0,2),(1,2),(1,3)}.
  CHECK(localization_iou(hm, mask) == doctest::Approx(2.0 / 5));
  CHECK(localization_iou(hm, Image(2, 4, 1)) == 0.0);
  CHECK_THROWS_AS(localization_iou(hm, Image(4, 2, 1)), ShapeError);
}
