#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "neurofuse/image.hpp"

namespace nf {

struct OtsuResult {
  int threshold = 0;
  Image mask;  // 255 where intensity > threshold
  // Weighted intra-class variance q1 s1^2 + q2 s2^2 for every candidate k.
  std::array<double, 256> objective{};
};

/// Threshold minimizing the weighted intra-class variance, smallest k on ties.
OtsuResult otsu_threshold(const Image& gray);

enum class RoiMode { largest_component, union_all };

struct Box {
  int top = 0, left = 0, height = 0, width = 0;
  bool operator==(const Box&) const = default;
};

Image crop(const Image& img, const Box& box);

struct RoiResult {
  Image crop;
  Box box;
  bool empty_foreground = false;
};

/// Crops to the bounding box of the foreground (largest 4-connected component
/// by default), grown by `margin` and clipped. An empty mask keeps the full image.
RoiResult roi_crop(const Image& original, const Image& mask, int margin = 0,
                   RoiMode mode = RoiMode::largest_component);

struct ClaheParams {
  int grid = 8;
  double clip_limit = 2.0;
};

/// Equalization lookup table of one tile histogram: clip at
/// clip_limit * pixels / 256, spread the excess evenly over all bins, map
/// through the clipped CDF rescaled so the lowest bin lands on 0.
std::array<double, 256> clahe_tile_mapping(const std::array<double, 256>& hist, double pixels,
                                           double clip_limit);

/// Tile extents [begin, end) along an axis of length `n` split into `g` tiles.
inline int tile_begin(int i, int n, int g) { return static_cast<int>(int64_t{i} * n / g); }

/// Contrast-limited adaptive histogram equalization with bilinear blending of
/// the four nearest tile mappings. Grids larger than the image shrink to it.
Image clahe(const Image& gray, const ClaheParams& params = {});

struct AugmentSpec {
  double rotation_max_deg = 40.0;
  double shift_frac = 0.2;
  double shear_max = 0.2;
  double zoom_frac = 0.2;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
};

/// One concrete draw from an AugmentSpec.
struct AugmentParams {
  double rotation_deg = 0;
  double shift_x = 0;  // pixels
  double shift_y = 0;
  double shear = 0;
  double zoom = 1;
  bool hflip = false;
  bool vflip = false;
};

AugmentParams sample_augment(const AugmentSpec& spec, int height, int width, std::mt19937_64& rng);

/// Applies the composed affine transform by inverse mapping around the image
/// center, nearest-neighbour sampling and nearest-edge fill.
Image apply_augment(const Image& img, const AugmentParams& params);

inline Image augment(const Image& img, const AugmentSpec& spec, std::mt19937_64& rng) {
  return apply_augment(img, sample_augment(spec, img.height, img.width, rng));
}

/// Per-item generator derived from (seed, index) so results never depend on
/// processing order.
std::mt19937_64 item_rng(uint64_t seed, uint64_t index);

struct PreprocessOptions {
  bool roi = true;
  int roi_margin = 0;
  RoiMode roi_mode = RoiMode::largest_component;
  ClaheParams clahe;
  int out_size = 224;
};

struct PreprocessResult {
  Image image;
  int threshold = 0;
  Box roi;
  bool empty_foreground = false;
};

/// grayscale -> Otsu ROI crop -> CLAHE -> nearest resize.
PreprocessResult preprocess_image(const Image& img, const PreprocessOptions& opts);

/// Carries a pixel-aligned companion image (such as a mask) through the same
/// crop and resize that produced `result`.
Image follow_preprocess(const Image& companion, const PreprocessResult& result, int out_size);

}  // namespace nf
