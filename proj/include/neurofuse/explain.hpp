#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "neurofuse/architecture.hpp"
#include "neurofuse/image.hpp"

namespace nf {

/// Class activation map: `grid` at the target layer's spatial size and
/// `upsampled` at the network input size, both row-major in [0, 1].
struct Heatmap {
  int grid_height = 0;
  int grid_width = 0;
  std::vector<double> grid;
  int height = 0;
  int width = 0;
  std::vector<double> upsampled;
  int class_index = -1;
  std::string layer;

  double at(int r, int c) const { return upsampled[static_cast<size_t>(r) * width + c]; }
};

/// Bilinear resampling with half-pixel centers and clamped borders.
std::vector<double> upsample_bilinear(const std::vector<double>& grid, int h, int w, int out_h, int out_w);

/// Core of Grad-CAM from a captured activation A and dscore/dA, both
/// [1, h, w, C]: alpha_k = spatial mean of the gradient, map = relu(sum_k
/// alpha_k A_k) divided by its max (an all-zero map stays zero).
Heatmap cam_from_gradients(const Tensor<double>& activation, const Tensor<double>& gradient, int out_height,
                           int out_width);

/// Grad-CAM of the MLP logit `class_index` with respect to the output of the
/// convolutional layer `target_layer`, for one image [1, H, W, C] or
/// [H, W, C]. Runs in inference mode and leaves parameter gradients untouched.
template <typename T>
Heatmap grad_cam(FusionClassifier<T>& net, const Tensor<T>& image, int class_index,
                 const std::string& target_layer = FusionClassifier<T>::kPointwiseLayer);

/// Jet colormap: dark blue at 0 through cyan, yellow to dark red at 1.
std::array<uint8_t, 3> jet_color(double v);

/// RGB blend (1 - alpha) * gray + alpha * jet(heat), with the heatmap grid
/// resampled to the image size.
Image overlay(const Image& image, const Heatmap& heatmap, double alpha = 0.4);

/// Pixels whose normalized heat is at least 0.75.
std::vector<bool> top_quartile_region(const Heatmap& heatmap);

/// IoU of the top-quartile region with the nonzero pixels of `mask`, which
/// must have the heatmap's upsampled size.
double localization_iou(const Heatmap& heatmap, const Image& mask);

}  // namespace nf
