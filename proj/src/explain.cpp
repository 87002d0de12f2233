#include "neurofuse/explain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace nf {

std::vector<double> upsample_bilinear(const std::vector<double>& grid, int h, int w, int out_h, int out_w) {
  if (h <= 0 || w <= 0 || out_h <= 0 || out_w <= 0 || grid.size() != static_cast<size_t>(h) * w) {
    throw std::invalid_argument("bilinear upsampling needs a non-empty grid of the stated size");
  }
  auto source = [](int i, int n, int out_n, int& lo, int& hi, double& frac) {
    double s = (i + 0.5) * n / out_n - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    lo = static_cast<int>(std::floor(s));
    hi = std::min(lo + 1, n - 1);
    frac = s - lo;
  };
  std::vector<double> out(static_cast<size_t>(out_h) * out_w);
  for (int r = 0; r < out_h; ++r) {
    int r0, r1;
    double fr;
    source(r, h, out_h, r0, r1, fr);
    for (int c = 0; c < out_w; ++c) {
      int c0, c1;
      double fc;
      source(c, w, out_w, c0, c1, fc);
      const double top = grid[r0 * w + c0] * (1 - fc) + grid[r0 * w + c1] * fc;
      const double bottom = grid[r1 * w + c0] * (1 - fc) + grid[r1 * w + c1] * fc;
      out[static_cast<size_t>(r) * out_w + c] = top * (1 - fr) + bottom * fr;
    }
  }
  return out;
}

Heatmap cam_from_gradients(const Tensor<double>& activation, const Tensor<double>& gradient, int out_height,
                           int out_width) {
  const Shape& s = activation.shape();
  if (s.size() != 4 || s[0] != 1 || gradient.shape() != s) {
    throw ShapeError("Grad-CAM needs matching [1,h,w,C] activation and gradient, got " + shape_str(s) + " and " +
                     shape_str(gradient.shape()));
  }
  const int64_t h = s[1], w = s[2], C = s[3], hw = h * w;
  std::vector<double> alpha(C, 0.0);
  for (int64_t p = 0; p < hw; ++p)
    for (int64_t k = 0; k < C; ++k) alpha[k] += gradient[p * C + k];
  for (double& a : alpha) a /= static_cast<double>(hw);

  Heatmap hm;
  hm.grid_height = static_cast<int>(h);
  hm.grid_width = static_cast<int>(w);
  hm.grid.assign(hw, 0.0);
  double peak = 0;
  for (int64_t p = 0; p < hw; ++p) {
    double v = 0;
    for (int64_t k = 0; k < C; ++k) v += alpha[k] * activation[p * C + k];
    hm.grid[p] = std::max(v, 0.0);
    peak = std::max(peak, hm.grid[p]);
  }
  if (peak > 0)
    for (double& v : hm.grid) v /= peak;
  hm.height = out_height;
  hm.width = out_width;
  hm.upsampled = upsample_bilinear(hm.grid, hm.grid_height, hm.grid_width, out_height, out_width);
  return hm;
}

template <typename T>
Heatmap grad_cam(FusionClassifier<T>& net, const Tensor<T>& image, int class_index, const std::string& target_layer) {
  const LayerInfo* layer = net.find_layer(target_layer);
  if (!layer) throw std::invalid_argument("unknown layer '" + target_layer + "'");
  if (layer->kind != LayerKind::conv && layer->kind != LayerKind::depthwise_separable) {
    throw std::invalid_argument("Grad-CAM target '" + target_layer + "' is a " + layer_kind_name(layer->kind) +
                                " layer, not a convolution");
  }
  if (!net.has_head()) throw std::invalid_argument("Grad-CAM needs a network with its MLP head");
  const int64_t K = net.config().fusion.num_classes;
  if (class_index < 0 || class_index >= K) {
    throw std::out_of_range("class index " + std::to_string(class_index) + " outside [0, " + std::to_string(K) + ")");
  }
  Tensor<T> batch = image;
  if (batch.rank() == 3) batch = batch.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  if (batch.rank() != 4 || batch.dim(0) != 1) throw ShapeError("Grad-CAM takes a single image, got " + shape_str(image.shape()));

  // Freeze parameters so the sweep only reaches the watched activation.
  std::vector<std::pair<Parameter<T>*, bool>> saved;
  for (auto& p : net.params()) {
    saved.emplace_back(p.get(), p->var.node()->requires_grad);
    p->var.node()->requires_grad = false;
  }
  struct Restore {
    std::vector<std::pair<Parameter<T>*, bool>>& saved;
    ~Restore() {
      for (auto& [p, on] : saved) p->var.node()->requires_grad = on;
    }
  } restore{saved};

  std::map<std::string, Var<T>> captured;
  ForwardContext<T> ctx;
  ctx.mode = ops::Mode::infer;
  ctx.watch = target_layer;
  ctx.captures = &captured;
  ClassifierOutput<T> out = net.forward(Var<T>::leaf(batch), ctx);
  Var<T> target = captured.at(target_layer);

  Tensor<T> seed(out.logits.shape());
  seed[class_index] = T(1);
  backward(out.logits, seed);

  Heatmap hm = cam_from_gradients(target.value().template cast<double>(), target.grad().template cast<double>(),
                                  static_cast<int>(batch.dim(1)), static_cast<int>(batch.dim(2)));
  hm.class_index = class_index;
  hm.layer = target_layer;
  return hm;
}

std::array<uint8_t, 3> jet_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto channel = [&](double center) {
    return static_cast<uint8_t>(std::lround(255 * std::clamp(1.5 - std::abs(4 * v - center), 0.0, 1.0)));
  };
  return {channel(3), channel(2), channel(1)};
}

Image overlay(const Image& image, const Heatmap& heatmap, double alpha) {
  const Image gray = to_grayscale(image);
  Image out(gray.height, gray.width, 3);
  if (gray.empty()) return out;
  const std::vector<double> heat =
      upsample_bilinear(heatmap.grid, heatmap.grid_height, heatmap.grid_width, gray.height, gray.width);
  for (int r = 0; r < gray.height; ++r) {
    for (int c = 0; c < gray.width; ++c) {
      const std::array<uint8_t, 3> color = jet_color(heat[static_cast<size_t>(r) * gray.width + c]);
      const double g = gray.at(r, c);
      for (int ch = 0; ch < 3; ++ch) {
        out.at(r, c, ch) = static_cast<uint8_t>(std::lround(std::clamp((1 - alpha) * g + alpha * color[ch], 0.0, 255.0)));
      }
    }
  }
  return out;
}

std::vector<bool> top_quartile_region(const Heatmap& heatmap) {
  std::vector<bool> region(heatmap.upsampled.size());
  for (size_t i = 0; i < region.size(); ++i) region[i] = heatmap.upsampled[i] >= 0.75;
  return region;
}

double localization_iou(const Heatmap& heatmap, const Image& mask) {
  if (mask.height != heatmap.height || mask.width != heatmap.width) {
    throw ShapeError("mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width) + ", heatmap is " +
                     std::to_string(heatmap.height) + "x" + std::to_string(heatmap.width));
  }
  const std::vector<bool> region = top_quartile_region(heatmap);
  int64_t inter = 0, uni = 0;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      const bool a = region[static_cast<size_t>(r) * mask.width + c];
      const bool b = mask.at(r, c) != 0;
      inter += a && b;
      uni += a || b;
    }
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

template Heatmap grad_cam(FusionClassifier<float>&, const Tensor<float>&, int, const std::string&);
template Heatmap grad_cam(FusionClassifier<double>&, const Tensor<double>&, int, const std::string&);

}  // namespace nf
