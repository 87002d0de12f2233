#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace nf {

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c, uint8_t fill = 0);
  Image(int h, int w, int c, std::vector<uint8_t> data);

  bool empty() const { return pixels.empty(); }
  uint8_t& at(int r, int c, int ch = 0) {
    return pixels[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
  uint8_t at(int r, int c, int ch = 0) const {
    return pixels[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes PNG or JPEG (or anything else the codec accepts) into gray or RGB.
/// Alpha is dropped and 16-bit data is scaled to 8 bits.
Image read_image(const std::filesystem::path& path);
/// Encodes PNG; gray stays single channel.
void write_png(const std::filesystem::path& path, const Image& img);
/// PNG bytes, used where byte-identical output must be checked.
std::vector<uint8_t> encode_png(const Image& img);

/// round(0.299 R + 0.587 G + 0.114 B) per pixel; 1-channel input is returned as is.
Image to_grayscale(const Image& img);

/// out(i, j) = in(floor(i H / out_h), floor(j W / out_w)).
Image resize_nearest(const Image& img, int out_h, int out_w);

}  // namespace nf
