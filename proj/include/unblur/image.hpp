#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "unblur/errors.hpp"
#include "unblur/tensor.hpp"

namespace unblur {

// 8-bit image, channel-major (C,H,W), RGB order for 3-channel data.
struct Image8 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // size channels*height*width

  uint8_t at(int c, int h, int w) const {
    return pixels[(static_cast<size_t>(c) * height + h) * width + w];
  }
  int64_t numel() const {
    return static_cast<int64_t>(channels) * height * width;
  }
};

inline Image8 load_image_u8(const std::filesystem::path& path, int channels = 3) {
  cv::Mat m = cv::imread(path.string(),
                         channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (m.empty()) throw DataError("cannot read image: " + path.string());
  Image8 img;
  img.channels = channels;
  img.height = m.rows;
  img.width = m.cols;
  img.pixels.resize(static_cast<size_t>(channels) * m.rows * m.cols);
  for (int h = 0; h < m.rows; ++h) {
    for (int w = 0; w < m.cols; ++w) {
      if (channels == 1) {
        img.pixels[static_cast<size_t>(h) * m.cols + w] = m.at<uint8_t>(h, w);
      } else {
        const cv::Vec3b bgr = m.at<cv::Vec3b>(h, w);
        for (int c = 0; c < 3; ++c)  // BGR -> RGB
          img.pixels[(static_cast<size_t>(c) * m.rows + h) * m.cols + w] =
              bgr[2 - c];
      }
    }
  }
  return img;
}

inline void save_image_u8(const std::filesystem::path& path, const Image8& img) {
  cv::Mat m;
  if (img.channels == 1) {
    m = cv::Mat(img.height, img.width, CV_8UC1);
    for (int h = 0; h < img.height; ++h)
      for (int w = 0; w < img.width; ++w) m.at<uint8_t>(h, w) = img.at(0, h, w);
  } else {
    m = cv::Mat(img.height, img.width, CV_8UC3);
    for (int h = 0; h < img.height; ++h)
      for (int w = 0; w < img.width; ++w)
        m.at<cv::Vec3b>(h, w) =
            cv::Vec3b(img.at(2, h, w), img.at(1, h, w), img.at(0, h, w));
  }
  if (!cv::imwrite(path.string(), m))
    throw DataError("cannot write image: " + path.string());
}

// 8-bit value -> [-1,1]: x/127.5 - 1
template <typename T>
Tensor<T> to_tensor(const Image8& img) {
  Tensor<T> t({img.channels, img.height, img.width});
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(img.pixels[static_cast<size_t>(i)] / 127.5 - 1.0);
  return t;
}

// [-1,1] -> 8-bit with clamping and round-to-nearest.
template <typename T>
Image8 to_image8(const Tensor<T>& t) {
  if (t.ndim() != 3) throw ShapeError("to_image8 expects a (C,H,W) tensor");
  Image8 img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = (static_cast<double>(t[i]) + 1.0) * 127.5;
    v = std::min(255.0, std::max(0.0, v));
    img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(v));
  }
  return img;
}

template <typename T>
Tensor<T> load_image_tensor(const std::filesystem::path& path, int channels = 3) {
  return to_tensor<T>(load_image_u8(path, channels));
}

template <typename T>
void save_image_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  save_image_u8(path, to_image8(t));
}

}  // namespace unblur
