#pragma once

#include <filesystem>
#include <vector>

namespace stonefuse {

// RGB image, channel-major float planes in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> chw;  // 3 * height * width

  float& at(int c, int r, int col) {
    return chw[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
  float at(int c, int r, int col) const {
    return chw[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
};

Image make_image(int width, int height);
Image load_image(const std::filesystem::path& p);
void save_image(const Image& img, const std::filesystem::path& p);

}  // namespace stonefuse
