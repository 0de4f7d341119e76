#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stonefuse/image.hpp"
#include "stonefuse/manifest.hpp"

namespace stonefuse::synth {

struct ClassTextureParams {
  std::array<float, 3> color_mean{};  // in [0,1]
  float color_spread = 0.06f;
  float freq_lo = 0.05f;  // texture frequency band, as a fraction of image size
  float freq_hi = 0.20f;
  float blob_density = 3.0f;  // blobs per 64x64 tile
};

struct DegradeParams {
  float blur_sigma = 2.5f;
  float noise_std = 0.004f;  // kept below the render grain so blur dominates
  float vignette = 0.35f;
  float contrast_jitter = 0.3f;
};

struct SynthSpec {
  int num_classes = 6;
  int images_per_class_per_view = 10;
  int image_size = 96;
  std::vector<ClassTextureParams> texture_params;  // one per class
  float view_correlation = 0.8f;
  std::uint64_t seed = 0;
  std::string domain_tag = "A";
  float degradation_strength = 0.0f;  // 0 disables the endoscope-like pipeline
  DegradeParams degrade;
};

// Distinct per-class texture parameters plus stone-type class keys for the
// 6-class default ("C0".."Cn" otherwise).
SynthSpec default_spec(int num_classes, int images_per_class_per_view, int image_size,
                       std::uint64_t seed);
std::vector<std::string> default_class_names(int num_classes);

void validate_spec(const SynthSpec& spec);

// Writes images/, manifest.csv and a synthspec.json sidecar under `out`.
// Each fragment contributes one SUR and one SEC image; the fragment id is the
// image_id prefix before the view suffix.
DatasetManifest generate_dataset(const SynthSpec& spec, const std::filesystem::path& out);

// Clean domain A and its degraded endoscope-like counterpart B.
std::pair<DatasetManifest, DatasetManifest> two_domain_pair(
    const SynthSpec& spec_a, const SynthSpec& spec_b, const std::filesystem::path& out_a,
    const std::filesystem::path& out_b);

// Renders a single synthetic view without touching the filesystem.
Image render_image(const SynthSpec& spec, int class_idx, int fragment_idx, View view);

std::string spec_to_json(const SynthSpec& spec);
SynthSpec spec_from_json(const std::string& text);

// Variance of a 3x3 Laplacian response on the gray image (sharpness proxy).
double laplacian_variance(const Image& img);

}  // namespace stonefuse::synth
