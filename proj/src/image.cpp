#include "stonefuse/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>

#include "stonefuse/common.hpp"

namespace stonefuse {

Image make_image(int width, int height) {
  Image img;
  img.width = width;
  img.height = height;
  img.chw.assign(static_cast<std::size_t>(3) * width * height, 0.0f);
  return img;
}

Image load_image(const std::filesystem::path& p) {
  cv::Mat m = cv::imread(p.string(), cv::IMREAD_COLOR);
  if (m.empty()) fail("unreadable_image", "cannot read image " + p.string());
  Image img = make_image(m.cols, m.rows);
  for (int r = 0; r < m.rows; ++r) {
    const auto* row = m.ptr<cv::Vec3b>(r);
    for (int c = 0; c < m.cols; ++c) {
      // OpenCV loads BGR
      img.at(0, r, c) = row[c][2] / 255.0f;
      img.at(1, r, c) = row[c][1] / 255.0f;
      img.at(2, r, c) = row[c][0] / 255.0f;
    }
  }
  return img;
}

void save_image(const Image& img, const std::filesystem::path& p) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int r = 0; r < img.height; ++r) {
    auto* row = m.ptr<cv::Vec3b>(r);
    for (int c = 0; c < img.width; ++c) {
      auto q = [&](int ch) {
        return static_cast<unsigned char>(
            std::clamp(img.at(ch, r, c), 0.0f, 1.0f) * 255.0f + 0.5f);
      };
      row[c] = cv::Vec3b(q(2), q(1), q(0));
    }
  }
  if (!cv::imwrite(p.string(), m)) {
    fail("unwritable_path", "cannot write image " + p.string());
  }
}

}  // namespace stonefuse
