#include "neurofuse/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nf {

namespace {

using u128 = unsigned __int128;

// Between-class term S1^2/n1 + S2^2/n2 as an exact fraction num/den.
struct Between {
  u128 num;
  u128 den;
};

Between between_term(uint64_t n1, uint64_t s1, uint64_t n, uint64_t s) {
  const uint64_t n2 = n - n1, s2 = s - s1;
  if (n1 == 0 || n2 == 0) return {u128(s) * s, n};
  return {u128(s1) * s1 * n2 + u128(s2) * s2 * n1, u128(n1) * n2};
}

uint8_t clamp_round(double v) {
  return static_cast<uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

}  // namespace

OtsuResult otsu_threshold(const Image& gray) {
  if (gray.channels != 1 || gray.empty()) {
    throw std::invalid_argument("otsu_threshold expects a non-empty single-channel image");
  }
  std::array<uint64_t, 256> hist{};
  for (uint8_t v : gray.pixels) ++hist[v];
  uint64_t n = 0, s = 0;
  long double q = 0;
  for (int v = 0; v < 256; ++v) {
    n += hist[v];
    s += hist[v] * v;
    q += static_cast<long double>(hist[v]) * v * v;
  }

  // Minimizing q1 s1^2 + q2 s2^2 is maximizing S1^2/n1 + S2^2/n2, since
  // N * within = sum(x^2) - S1^2/n1 - S2^2/n2. The comparison is exact in
  // 128-bit integers for images up to 2^20 pixels.
  const bool exact = n <= (uint64_t{1} << 20);
  OtsuResult r;
  uint64_t n1 = 0, s1 = 0;
  Between best{0, 1};
  long double best_ld = -1;
  for (int k = 0; k < 256; ++k) {
    n1 += hist[k];
    s1 += hist[k] * k;
    const Between b = between_term(n1, s1, n, s);
    const long double bld = static_cast<long double>(b.num) / static_cast<long double>(b.den);
    r.objective[k] = static_cast<double>((q - bld) / n);
    const bool better = exact ? (k == 0 || b.num * best.den > best.num * b.den) : (k == 0 || bld > best_ld);
    if (better) {
      best = b;
      best_ld = bld;
      r.threshold = k;
    }
  }
  r.mask = Image(gray.height, gray.width, 1);
  for (size_t i = 0; i < gray.pixels.size(); ++i) {
    r.mask.pixels[i] = gray.pixels[i] > r.threshold ? 255 : 0;
  }
  return r;
}

RoiResult roi_crop(const Image& original, const Image& mask, int margin, RoiMode mode) {
  if (mask.height != original.height || mask.width != original.width || mask.channels != 1) {
    throw std::invalid_argument("ROI mask must be single-channel with the image's dimensions");
  }
  const int H = mask.height, W = mask.width;
  int top = H, left = W, bottom = -1, right = -1;

  if (mode == RoiMode::union_all) {
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        if (mask.at(r, c)) {
          top = std::min(top, r);
          bottom = std::max(bottom, r);
          left = std::min(left, c);
          right = std::max(right, c);
        }
  } else {
    std::vector<uint8_t> seen(mask.pixels.size(), 0);
    std::vector<int> stack;
    size_t best_size = 0;
    for (int start = 0; start < H * W; ++start) {
      if (!mask.pixels[start] || seen[start]) continue;
      size_t size = 0;
      int t = H, l = W, b = -1, rt = -1;
      stack.push_back(start);
      seen[start] = 1;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int r = p / W, c = p % W;
        ++size;
        t = std::min(t, r);
        b = std::max(b, r);
        l = std::min(l, c);
        rt = std::max(rt, c);
        const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (const auto& q : nbr) {
          if (q[0] < 0 || q[0] >= H || q[1] < 0 || q[1] >= W) continue;
          const int qi = q[0] * W + q[1];
          if (mask.pixels[qi] && !seen[qi]) {
            seen[qi] = 1;
            stack.push_back(qi);
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        top = t;
        bottom = b;
        left = l;
        right = rt;
      }
    }
  }

  RoiResult res;
  if (bottom < 0) {
    res.crop = original;
    res.box = {0, 0, H, W};
    res.empty_foreground = true;
    return res;
  }
  top = std::max(0, top - margin);
  left = std::max(0, left - margin);
  bottom = std::min(H - 1, bottom + margin);
  right = std::min(W - 1, right + margin);
  res.box = {top, left, bottom - top + 1, right - left + 1};
  res.crop = crop(original, res.box);
  return res;
}

Image crop(const Image& img, const Box& box) {
  if (box.top < 0 || box.left < 0 || box.height <= 0 || box.width <= 0 || box.top + box.height > img.height ||
      box.left + box.width > img.width) {
    throw std::invalid_argument("crop box outside the image");
  }
  Image out(box.height, box.width, img.channels);
  for (int r = 0; r < box.height; ++r)
    for (int c = 0; c < box.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(box.top + r, box.left + c, ch);
  return out;
}

std::array<double, 256> clahe_tile_mapping(const std::array<double, 256>& hist, double pixels,
                                           double clip_limit) {
  std::array<double, 256> h = hist;
  if (clip_limit > 0) {
    const double limit = clip_limit * pixels / 256.0;
    double excess = 0;
    for (double& v : h) {
      if (v > limit) {
        excess += v - limit;
        v = limit;
      }
    }
    const double share = excess / 256.0;
    for (double& v : h) v += share;
  }
  std::array<double, 256> map{};
  double cdf = 0, cdf_min = 0;
  for (int v = 0; v < 256; ++v) {
    cdf += h[v];
    if (v == 0) cdf_min = cdf;
    const double denom = pixels - cdf_min;
    map[v] = denom > 0 ? (cdf - cdf_min) * 255.0 / denom : 0.0;
  }
  return map;
}

Image clahe(const Image& gray, const ClaheParams& params) {
  if (gray.channels != 1) throw std::invalid_argument("clahe expects a single-channel image");
  if (params.grid < 1) throw std::invalid_argument("clahe grid must be >= 1");
  const int H = gray.height, W = gray.width;
  const int gy = std::min(params.grid, H), gx = std::min(params.grid, W);

  std::vector<std::array<double, 256>> maps(static_cast<size_t>(gy) * gx);
  for (int ty = 0; ty < gy; ++ty) {
    for (int tx = 0; tx < gx; ++tx) {
      std::array<double, 256> hist{};
      const int r0 = tile_begin(ty, H, gy), r1 = tile_begin(ty + 1, H, gy);
      const int c0 = tile_begin(tx, W, gx), c1 = tile_begin(tx + 1, W, gx);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) hist[gray.at(r, c)] += 1.0;
      maps[static_cast<size_t>(ty) * gx + tx] =
          clahe_tile_mapping(hist, double(r1 - r0) * (c1 - c0), params.clip_limit);
    }
  }

  // For each row (column): the two bracketing tiles and the weight of the second.
  struct Interp {
    int a, b;
    double w;
  };
  auto axis = [](int n, int g) {
    std::vector<double> centre(static_cast<size_t>(g));
    for (int t = 0; t < g; ++t) centre[t] = (tile_begin(t, n, g) + tile_begin(t + 1, n, g) - 1) / 2.0;
    std::vector<Interp> out(static_cast<size_t>(n));
    for (int p = 0; p < n; ++p) {
      if (p <= centre.front()) {
        out[p] = {0, 0, 0.0};
      } else if (p >= centre.back()) {
        out[p] = {g - 1, g - 1, 0.0};
      } else {
        int t = 0;
        while (centre[t + 1] <= p) ++t;
        out[p] = {t, t + 1, (p - centre[t]) / (centre[t + 1] - centre[t])};
      }
    }
    return out;
  };
  const auto rows = axis(H, gy), cols = axis(W, gx);

  Image out(H, W, 1);
  for (int r = 0; r < H; ++r) {
    const Interp& iy = rows[r];
    for (int c = 0; c < W; ++c) {
      const Interp& ix = cols[c];
      const int v = gray.at(r, c);
      const double m00 = maps[static_cast<size_t>(iy.a) * gx + ix.a][v];
      const double m01 = maps[static_cast<size_t>(iy.a) * gx + ix.b][v];
      const double m10 = maps[static_cast<size_t>(iy.b) * gx + ix.a][v];
      const double m11 = maps[static_cast<size_t>(iy.b) * gx + ix.b][v];
      const double top = (1 - ix.w) * m00 + ix.w * m01;
      const double bottom = (1 - ix.w) * m10 + ix.w * m11;
      out.at(r, c) = clamp_round((1 - iy.w) * top + iy.w * bottom);
    }
  }
  return out;
}

AugmentParams sample_augment(const AugmentSpec& spec, int height, int width, std::mt19937_64& rng) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto coin = [&](double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; };
  AugmentParams p;
  p.rotation_deg = uni(-spec.rotation_max_deg, spec.rotation_max_deg);
  p.shift_x = uni(-spec.shift_frac, spec.shift_frac) * width;
  p.shift_y = uni(-spec.shift_frac, spec.shift_frac) * height;
  p.shear = uni(-spec.shear_max, spec.shear_max);
  p.zoom = uni(1.0 - spec.zoom_frac, 1.0 + spec.zoom_frac);
  p.hflip = coin(spec.hflip_prob);
  p.vflip = coin(spec.vflip_prob);
  return p;
}

Image apply_augment(const Image& img, const AugmentParams& p) {
  // Forward map about the centre: dst = R * Shear * Zoom * Flip * src + shift.
  const double th = p.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double fx = p.hflip ? -1.0 : 1.0, fy = p.vflip ? -1.0 : 1.0;
  // R * Sh, with Sh = [[1, shear], [0, 1]]
  const double a = cs, b = cs * p.shear - sn, c = sn, d = sn * p.shear + cs;
  const double m00 = a * p.zoom * fx, m01 = b * p.zoom * fy;
  const double m10 = c * p.zoom * fx, m11 = d * p.zoom * fy;
  const double det = m00 * m11 - m01 * m10;
  if (std::abs(det) < 1e-12) throw std::invalid_argument("degenerate augmentation transform");
  const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;

  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  Image out(img.height, img.width, img.channels);
  for (int r = 0; r < img.height; ++r) {
    const double dy = r - cy - p.shift_y;
    for (int col = 0; col < img.width; ++col) {
      const double dx = col - cx - p.shift_x;
      const double sx = i00 * dx + i01 * dy + cx;
      const double sy = i10 * dx + i11 * dy + cy;
      const int ix = std::clamp(static_cast<int>(std::round(sx)), 0, img.width - 1);
      const int iy = std::clamp(static_cast<int>(std::round(sy)), 0, img.height - 1);
      for (int ch = 0; ch < img.channels; ++ch) out.at(r, col, ch) = img.at(iy, ix, ch);
    }
  }
  return out;
}

std::mt19937_64 item_rng(uint64_t seed, uint64_t index) {
  auto splitmix = [](uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return std::mt19937_64(splitmix(splitmix(seed) ^ index));
}

PreprocessResult preprocess_image(const Image& img, const PreprocessOptions& opts) {
  PreprocessResult res;
  Image gray = to_grayscale(img);
  res.roi = {0, 0, gray.height, gray.width};
  if (opts.roi) {
    OtsuResult otsu = otsu_threshold(gray);
    res.threshold = otsu.threshold;
    RoiResult roi = roi_crop(gray, otsu.mask, opts.roi_margin, opts.roi_mode);
    res.roi = roi.box;
    res.empty_foreground = roi.empty_foreground;
    gray = std::move(roi.crop);
  }
  res.image = resize_nearest(clahe(gray, opts.clahe), opts.out_size, opts.out_size);
  return res;
}

Image follow_preprocess(const Image& companion, const PreprocessResult& result, int out_size) {
  return resize_nearest(crop(companion, result.roi), out_size, out_size);
}

}  // namespace nf
