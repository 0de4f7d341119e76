#include "stonefuse/patch.hpp"

#include <cmath>

#include "stonefuse/common.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse {

std::vector<PatchRecord> extract_patches_from(const Image& img, const ImageEntry& entry,
                                              int patch_size, int count,
                                              std::uint64_t rng_seed) {
  if (img.width < patch_size || img.height < patch_size) {
    fail("image_too_small", "image " + entry.image_id + " (" +
                                std::to_string(img.width) + "x" +
                                std::to_string(img.height) + ") smaller than patch size " +
                                std::to_string(patch_size));
  }
  Rng rng(mix_seed(rng_seed, "patch:" + entry.image_id));
  std::uniform_int_distribution<int> row_d(0, img.height - patch_size);
  std::uniform_int_distribution<int> col_d(0, img.width - patch_size);
  std::vector<PatchRecord> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    PatchRecord p;
    p.patch_id = entry.image_id + "#" + std::to_string(i);
    p.source_image_id = entry.image_id;
    p.view = entry.view;
    p.class_label = entry.class_label;
    p.origin_row = row_d(rng);
    p.origin_col = col_d(rng);
    p.patch_size = patch_size;
    p.pixels.resize(static_cast<std::size_t>(3) * patch_size * patch_size);
    for (int c = 0; c < 3; ++c) {
      for (int r = 0; r < patch_size; ++r) {
        const float* src = &img.chw[(static_cast<std::size_t>(c) * img.height +
                                     p.origin_row + r) * img.width + p.origin_col];
        float* dst = &p.pixels[(static_cast<std::size_t>(c) * patch_size + r) * patch_size];
        std::copy(src, src + patch_size, dst);
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PatchRecord> extract_patches(const ImageEntry& entry, int patch_size,
                                         int count, std::uint64_t rng_seed) {
  Image img = load_image(entry.path);
  return extract_patches_from(img, entry, patch_size, count, rng_seed);
}

namespace {

void channel_stats(const std::vector<float>& pixels, int patch_size, double mean[3],
                   double stddev[3]) {
  const std::size_t plane = static_cast<std::size_t>(patch_size) * patch_size;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    const float* p = pixels.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      sum += p[i];
      sq += static_cast<double>(p[i]) * p[i];
    }
    mean[c] = sum / plane;
    stddev[c] = std::sqrt(std::max(0.0, sq / plane - mean[c] * mean[c]));
  }
}

}  // namespace

PatchRecord whiten_patch_with(const PatchRecord& patch, const double mean[3],
                              const double stddev[3]) {
  if (patch.whitened) fail("already_whitened", "patch " + patch.patch_id + " already whitened");
  const std::size_t plane = static_cast<std::size_t>(patch.patch_size) * patch.patch_size;
  PatchRecord out = patch;
  for (int c = 0; c < 3; ++c) {
    if (stddev[c] <= 1e-12) {
      fail("zero_variance_channel",
           "zero variance channel " + std::to_string(c) + " in patch " + patch.patch_id);
    }
    float* p = out.pixels.data() + c * plane;
    const double m = mean[c], inv = 1.0 / stddev[c];
    for (std::size_t i = 0; i < plane; ++i) {
      p[i] = static_cast<float>((p[i] - m) * inv);
    }
  }
  out.whitened = true;
  return out;
}

PatchRecord whiten_patch(const PatchRecord& patch) {
  double mean[3], stddev[3];
  channel_stats(patch.pixels, patch.patch_size, mean, stddev);
  return whiten_patch_with(patch, mean, stddev);
}

}  // namespace stonefuse
