#pragma once

// Straightforward reference implementations for the image operations. They
// favour the most literal reading of each definition over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "neurofuse/image.hpp"

namespace nf::testing {

inline Image random_image(int h, int w, std::mt19937_64& rng) {
  Image img(h, w, 1);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(d(rng));
  return img;
}

// Smooth structure plus noise, so some tiles clip heavily and others not at all.
inline Image textured_image(int h, int w, std::mt19937_64& rng) {
  Image img(h, w, 1);
  std::uniform_real_distribution<double> u(0, 1);
  const double fx = u(rng) * 0.2, fy = u(rng) * 0.2, amp = 20 + 100 * u(rng), base = 30 + 100 * u(rng);
  std::normal_distribution<double> noise(0, 4 + 20 * u(rng));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      img.at(r, c) = static_cast<uint8_t>(
          std::clamp(base + amp * std::sin(fx * c) * std::cos(fy * r) + noise(rng), 0.0, 255.0));
  return img;
}

/// Exhaustive Otsu: evaluates N * (q1 s1^2 + q2 s2^2) for every k directly
/// from the pixel list as an exact fraction and keeps the first minimum.
inline int otsu_exhaustive(const Image& img) {
  using i128 = __int128;
  // Each class contributes (n Q - S^2) / n; the sum is compared by cross
  // multiplication.
  i128 best_num = -1, best_den = 1;
  int best_k = 0;
  for (int k = 0; k < 256; ++k) {
    i128 n1 = 0, s1 = 0, q1 = 0, n2 = 0, s2 = 0, q2 = 0;
    for (uint8_t v : img.pixels) {
      if (v <= k) {
        ++n1;
        s1 += v;
        q1 += i128(v) * v;
      } else {
        ++n2;
        s2 += v;
        q2 += i128(v) * v;
      }
    }
    i128 num, den;
    if (n1 == 0) {
      num = n2 * q2 - s2 * s2;
      den = n2;
    } else if (n2 == 0) {
      num = n1 * q1 - s1 * s1;
      den = n1;
    } else {
      num = (n1 * q1 - s1 * s1) * n2 + (n2 * q2 - s2 * s2) * n1;
      den = n1 * n2;
    }
    if (best_num < 0 || num * best_den < best_num * den) {
      best_num = num;
      best_den = den;
      best_k = k;
    }
  }
  return best_k;
}

/// Literal CLAHE. Tiles are the cells of a g x g partition with integer
/// bounds floor(i n / g); each tile gets a clipped-histogram equalization
/// table; every pixel blends the tables of the tiles whose centres surround
/// it, found by scanning all centres.
inline Image clahe_reference(const Image& img, int grid, double clip) {
  const int H = img.height, W = img.width;
  const int gy = std::min(grid, H), gx = std::min(grid, W);
  auto bound = [](int i, int n, int g) { return int(std::floor(double(i) * n / g)); };
  std::vector<std::vector<double>> table(size_t(gy * gx), std::vector<double>(256));
  for (int ty = 0; ty < gy; ++ty)
    for (int tx = 0; tx < gx; ++tx) {
      std::vector<double> hist(256, 0.0);
      int count = 0;
      for (int r = bound(ty, H, gy); r < bound(ty + 1, H, gy); ++r)
        for (int c = bound(tx, W, gx); c < bound(tx + 1, W, gx); ++c) {
          hist[img.at(r, c)] += 1;
          ++count;
        }
      const double limit = clip * count / 256.0;
      double cut = 0;
      for (int v = 0; v < 256; ++v)
        if (hist[v] > limit) {
          cut += hist[v] - limit;
          hist[v] = limit;
        }
      for (int v = 0; v < 256; ++v) hist[v] += cut / 256.0;
      std::vector<double> cdf(256);
      double run = 0;
      for (int v = 0; v < 256; ++v) cdf[v] = (run += hist[v]);
      for (int v = 0; v < 256; ++v)
        table[size_t(ty * gx + tx)][v] =
            count - cdf[0] > 0 ? (cdf[v] - cdf[0]) / (count - cdf[0]) * 255.0 : 0.0;
    }
  auto centre = [&](int t, int n, int g) { return (bound(t, n, g) + bound(t + 1, n, g) - 1) * 0.5; };
  // Lower/upper bracketing tile and blend weight along one axis.
  auto bracket = [&](double p, int n, int g, int& lo, int& hi, double& w) {
    lo = hi = 0;
    w = 0;
    for (int t = 0; t < g; ++t)
      if (centre(t, n, g) <= p) lo = t;
    if (p <= centre(0, n, g)) return;
    if (p >= centre(g - 1, n, g)) {
      lo = hi = g - 1;
      return;
    }
    hi = lo + 1;
    w = (p - centre(lo, n, g)) / (centre(hi, n, g) - centre(lo, n, g));
  };
  Image out(H, W, 1);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      int y0, y1, x0, x1;
      double wy, wx;
      bracket(r, H, gy, y0, y1, wy);
      bracket(c, W, gx, x0, x1, wx);
      const int v = img.at(r, c);
      const double val = (1 - wy) * (1 - wx) * table[size_t(y0 * gx + x0)][v] +
                         (1 - wy) * wx * table[size_t(y0 * gx + x1)][v] +
                         wy * (1 - wx) * table[size_t(y1 * gx + x0)][v] +
                         wy * wx * table[size_t(y1 * gx + x1)][v];
      out.at(r, c) = uint8_t(std::clamp(std::round(val), 0.0, 255.0));
    }
  return out;
}

}  // namespace nf::testing
