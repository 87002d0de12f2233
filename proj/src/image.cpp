#include "neurofuse/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace nf {

Image::Image(int h, int w, int c, uint8_t fill) : height(h), width(w), channels(c) {
  if (h < 1 || w < 1 || (c != 1 && c != 3)) {
    throw std::invalid_argument("image must be at least 1x1 with 1 or 3 channels");
  }
  pixels.assign(static_cast<size_t>(h) * w * c, fill);
}

Image::Image(int h, int w, int c, std::vector<uint8_t> data) : Image(h, w, c) {
  if (data.size() != pixels.size()) {
    throw std::invalid_argument("image data length does not match " + std::to_string(h) + "x" +
                                std::to_string(w) + "x" + std::to_string(c));
  }
  pixels = std::move(data);
}

namespace {

cv::Mat to_mat(const Image& img) {
  cv::Mat m(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3,
            const_cast<uint8_t*>(img.pixels.data()));
  if (img.channels == 1) return m.clone();
  cv::Mat bgr;
  cv::cvtColor(m, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ImageIoError("cannot decode image " + path.string());
  if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
  if (m.depth() != CV_8U) throw ImageIoError("unsupported pixel depth in " + path.string());
  cv::Mat out;
  switch (m.channels()) {
    case 1: out = m; break;
    case 3: cv::cvtColor(m, out, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(m, out, cv::COLOR_BGRA2RGB); break;
    default: throw ImageIoError("unsupported channel count in " + path.string());
  }
  if (!out.isContinuous()) out = out.clone();
  Image img(out.rows, out.cols, out.channels());
  std::copy(out.data, out.data + img.pixels.size(), img.pixels.begin());
  return img;
}

std::vector<uint8_t> encode_png(const Image& img) {
  std::vector<uint8_t> buf;
  if (!cv::imencode(".png", to_mat(img), buf)) throw ImageIoError("PNG encoding failed");
  return buf;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (!cv::imwrite(path.string(), to_mat(img))) {
    throw ImageIoError("cannot write " + path.string());
  }
}

Image to_grayscale(const Image& img) {
  if (img.channels == 1) return img;
  Image out(img.height, img.width, 1);
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    const int r = img.pixels[3 * i], g = img.pixels[3 * i + 1], b = img.pixels[3 * i + 2];
    // Exact integer form of round-half-up of the weighted sum.
    out.pixels[i] = static_cast<uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return out;
}

Image resize_nearest(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize target must be at least 1x1");
  Image out(out_h, out_w, img.channels);
  for (int i = 0; i < out_h; ++i) {
    const int si = static_cast<int>(static_cast<int64_t>(i) * img.height / out_h);
    for (int j = 0; j < out_w; ++j) {
      const int sj = static_cast<int>(static_cast<int64_t>(j) * img.width / out_w);
      for (int c = 0; c < img.channels; ++c) out.at(i, j, c) = img.at(si, sj, c);
    }
  }
  return out;
}

}  // namespace nf
