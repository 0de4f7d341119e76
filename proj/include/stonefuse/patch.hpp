#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stonefuse/image.hpp"
#include "stonefuse/manifest.hpp"

namespace stonefuse {

struct PatchRecord {
  std::string patch_id;
  std::string source_image_id;
  View view = View::SUR;
  std::string class_label;
  int origin_row = 0;
  int origin_col = 0;
  int patch_size = 0;
  bool whitened = false;
  std::vector<float> pixels;  // 3 * patch_size * patch_size, channel-major
};

// Samples `count` patches with uniformly random origins over the valid offset
// range. Deterministic: the stream is derived from (rng_seed, image_id).
std::vector<PatchRecord> extract_patches(const ImageEntry& entry, int patch_size,
                                         int count, std::uint64_t rng_seed);

// Same, against an already-loaded image (avoids re-reading the file).
std::vector<PatchRecord> extract_patches_from(const Image& img, const ImageEntry& entry,
                                              int patch_size, int count,
                                              std::uint64_t rng_seed);

// Per-channel standardization to zero mean / unit std. Errors on an already
// whitened patch and on zero-variance channels.
PatchRecord whiten_patch(const PatchRecord& patch);

// Applies externally computed per-channel statistics (dataset-scope whitening).
PatchRecord whiten_patch_with(const PatchRecord& patch, const double mean[3],
                              const double stddev[3]);

}  // namespace stonefuse
