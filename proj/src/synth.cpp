#include "stonefuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stonefuse/common.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse::synth {

using nlohmann::json;

std::vector<std::string> default_class_names(int num_classes) {
  static const std::vector<std::string> keys = {"WW", "WD", "UA", "STR", "BRU", "CYS"};
  if (num_classes == 6) return keys;
  std::vector<std::string> out;
  for (int i = 0; i < num_classes; ++i) out.push_back("C" + std::to_string(i));
  return out;
}

SynthSpec default_spec(int num_classes, int images_per_class_per_view, int image_size,
                       std::uint64_t seed) {
  SynthSpec spec;
  spec.num_classes = num_classes;
  spec.images_per_class_per_view = images_per_class_per_view;
  spec.image_size = image_size;
  spec.seed = seed;
  // well-spread base colors; extra classes rotate hue deterministically
  const std::array<std::array<float, 3>, 6> palette = {{{0.62f, 0.48f, 0.30f},
                                                        {0.72f, 0.68f, 0.42f},
                                                        {0.55f, 0.30f, 0.25f},
                                                        {0.40f, 0.52f, 0.48f},
                                                        {0.75f, 0.45f, 0.55f},
                                                        {0.38f, 0.38f, 0.62f}}};
  for (int c = 0; c < num_classes; ++c) {
    ClassTextureParams p;
    if (c < 6) {
      p.color_mean = palette[c];
    } else {
      const float t = static_cast<float>(c) / num_classes;
      p.color_mean = {0.4f + 0.3f * std::sin(6.28f * t), 0.5f,
                      0.4f + 0.3f * std::cos(6.28f * t)};
    }
    // non-overlapping frequency bands and well-spread blob densities so the
    // class signal survives per-patch whitening and varies little per fragment
    p.color_spread = 0.05f + 0.015f * (c % 3);
    p.freq_lo = 0.03f + 0.045f * c;
    p.freq_hi = p.freq_lo + 0.03f;
    p.blob_density = 1.0f + 2.5f * c;
    spec.texture_params.push_back(p);
  }
  return spec;
}

void validate_spec(const SynthSpec& spec) {
  if (spec.num_classes < 2) fail("bad_spec", "need at least 2 classes");
  if (spec.images_per_class_per_view < 1) fail("bad_spec", "need at least 1 image per class per view");
  if (spec.image_size < 16) fail("bad_spec", "image_size too small");
  if (static_cast<int>(spec.texture_params.size()) != spec.num_classes) {
    fail("bad_spec", "texture_params size must equal num_classes");
  }
  if (spec.view_correlation < 0.0f || spec.view_correlation > 1.0f) {
    fail("bad_spec", "view_correlation must lie in [0,1]");
  }
  for (std::size_t a = 0; a < spec.texture_params.size(); ++a) {
    for (std::size_t b = a + 1; b < spec.texture_params.size(); ++b) {
      const auto& pa = spec.texture_params[a];
      const auto& pb = spec.texture_params[b];
      const float d = std::abs(pa.color_mean[0] - pb.color_mean[0]) +
                      std::abs(pa.color_mean[1] - pb.color_mean[1]) +
                      std::abs(pa.color_mean[2] - pb.color_mean[2]) +
                      std::abs(pa.blob_density - pb.blob_density) +
                      std::abs(pa.freq_lo - pb.freq_lo);
      if (d < 1e-6f) fail("bad_spec", "class parameter vectors must be pairwise distinct");
    }
  }
}

namespace {

struct Latent {
  std::array<float, 3> color_jitter{};
  float freq = 0.1f;
  float ring_period = 0.12f;
  float ring_phase = 0.0f;
  std::vector<float> noise_grid;  // g*g*3
  int grid = 0;
  struct Blob {
    float cx, cy, radius;
    std::array<float, 3> delta;
  };
  std::vector<Blob> blobs;
};

Latent draw_latent(Rng& rng, const ClassTextureParams& p, int image_size) {
  Latent l;
  std::normal_distribution<float> jn(0.0f, p.color_spread * 0.6f);
  for (auto& v : l.color_jitter) v = jn(rng);
  std::uniform_real_distribution<float> fu(p.freq_lo, p.freq_hi);
  l.freq = fu(rng);
  std::uniform_real_distribution<float> pu(0.0f, 6.2831853f);
  l.ring_phase = pu(rng);
  std::uniform_real_distribution<float> ru(0.08f, 0.20f);
  l.ring_period = ru(rng);
  l.grid = std::clamp(static_cast<int>(std::lround(image_size * l.freq)), 2,
                      image_size);
  l.noise_grid.resize(static_cast<std::size_t>(l.grid) * l.grid * 3);
  std::normal_distribution<float> gn(0.0f, 1.0f);
  for (auto& v : l.noise_grid) v = gn(rng);
  const int n_blobs = std::max(
      1, static_cast<int>(std::lround(p.blob_density * image_size * image_size /
                                      (64.0 * 64.0))));
  std::uniform_real_distribution<float> cu(0.0f, 1.0f);
  std::uniform_real_distribution<float> radu(0.03f, 0.12f);
  std::normal_distribution<float> dn(0.0f, p.color_spread * 1.5f);
  for (int i = 0; i < n_blobs; ++i) {
    Latent::Blob b;
    b.cx = cu(rng);
    b.cy = cu(rng);
    b.radius = radu(rng);
    for (auto& d : b.delta) d = dn(rng);
    l.blobs.push_back(b);
  }
  return l;
}

Latent lerp_latent(const Latent& shared, const Latent& own, float corr) {
  if (corr >= 1.0f) return shared;
  if (corr <= 0.0f) return own;
  Latent l = shared;
  auto mix = [corr](float a, float b) { return corr * a + (1.0f - corr) * b; };
  for (int c = 0; c < 3; ++c) l.color_jitter[c] = mix(shared.color_jitter[c], own.color_jitter[c]);
  l.freq = mix(shared.freq, own.freq);
  l.ring_phase = mix(shared.ring_phase, own.ring_phase);
  l.ring_period = mix(shared.ring_period, own.ring_period);
  // grids may differ in resolution when freq differs; keep the shared grid and
  // blend magnitudes only when sizes agree
  if (own.grid == shared.grid) {
    for (std::size_t i = 0; i < l.noise_grid.size(); ++i) {
      l.noise_grid[i] = mix(shared.noise_grid[i], own.noise_grid[i]);
    }
  }
  const std::size_t nb = std::min(shared.blobs.size(), own.blobs.size());
  for (std::size_t i = 0; i < nb; ++i) {
    l.blobs[i].cx = mix(shared.blobs[i].cx, own.blobs[i].cx);
    l.blobs[i].cy = mix(shared.blobs[i].cy, own.blobs[i].cy);
    l.blobs[i].radius = mix(shared.blobs[i].radius, own.blobs[i].radius);
    for (int c = 0; c < 3; ++c) {
      l.blobs[i].delta[c] = mix(shared.blobs[i].delta[c], own.blobs[i].delta[c]);
    }
  }
  return l;
}

float sample_grid(const std::vector<float>& grid, int g, int channel, float u, float v) {
  const float x = u * (g - 1), y = v * (g - 1);
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, g - 1), y1 = std::min(y0 + 1, g - 1);
  const float fx = x - x0, fy = y - y0;
  auto at = [&](int yy, int xx) {
    return grid[(static_cast<std::size_t>(channel) * g + yy) * g + xx];
  };
  return (1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x1) +
         (1 - fx) * fy * at(y1, x0) + fx * fy * at(y1, x1);
}

void gaussian_blur(Image& img, float sigma) {
  if (sigma <= 0.0f) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5f * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  float sum = 0.0f;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5f * i * i / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (auto& k : kernel) k /= sum;
  const int H = img.height, W = img.width;
  std::vector<float> tmp(static_cast<std::size_t>(H) * W);
  for (int c = 0; c < 3; ++c) {
    // horizontal
    for (int r = 0; r < H; ++r) {
      for (int col = 0; col < W; ++col) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) {
          const int cc = std::clamp(col + k, 0, W - 1);
          acc += kernel[k + radius] * img.at(c, r, cc);
        }
        tmp[static_cast<std::size_t>(r) * W + col] = acc;
      }
    }
    // vertical
    for (int r = 0; r < H; ++r) {
      for (int col = 0; col < W; ++col) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) {
          const int rr = std::clamp(r + k, 0, H - 1);
          acc += kernel[k + radius] * tmp[static_cast<std::size_t>(rr) * W + col];
        }
        img.at(c, r, col) = acc;
      }
    }
  }
}

void degrade(Image& img, const SynthSpec& spec, Rng& rng) {
  const float s = spec.degradation_strength;
  if (s <= 0.0f) return;
  const auto& d = spec.degrade;
  // fixed order: blur -> noise -> vignette -> contrast
  gaussian_blur(img, d.blur_sigma * s);
  std::normal_distribution<float> nd(0.0f, d.noise_std * s);
  for (auto& v : img.chw) v = std::clamp(v + nd(rng), 0.0f, 1.0f);
  const float cx = img.width * 0.5f, cy = img.height * 0.5f;
  const float rmax2 = cx * cx + cy * cy;
  for (int r = 0; r < img.height; ++r) {
    for (int col = 0; col < img.width; ++col) {
      const float dx = col - cx, dy = r - cy;
      const float f = 1.0f - d.vignette * s * (dx * dx + dy * dy) / rmax2;
      for (int c = 0; c < 3; ++c) img.at(c, r, col) *= f;
    }
  }
  std::uniform_real_distribution<float> cu(0.0f, 1.0f);
  const float gamma = 1.0f - d.contrast_jitter * s * cu(rng);
  for (auto& v : img.chw) v = std::clamp((v - 0.5f) * gamma + 0.5f, 0.0f, 1.0f);
}

std::string fragment_id(const std::string& class_label, int fragment_idx) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "f%04d", fragment_idx);
  return class_label + "_" + buf;
}

}  // namespace

Image render_image(const SynthSpec& spec, int class_idx, int fragment_idx, View view) {
  const auto& p = spec.texture_params.at(class_idx);
  const auto class_names = default_class_names(spec.num_classes);
  const std::string frag = fragment_id(class_names[class_idx], fragment_idx);
  Rng shared_rng(mix_seed(spec.seed, "frag:" + frag));
  Rng view_rng(mix_seed(spec.seed, "img:" + frag + ":" + view_name(view)));
  const Latent shared = draw_latent(shared_rng, p, spec.image_size);
  const Latent own = draw_latent(view_rng, p, spec.image_size);
  const Latent lat = lerp_latent(shared, own, spec.view_correlation);

  const int S = spec.image_size;
  Image img = make_image(S, S);
  for (int r = 0; r < S; ++r) {
    for (int col = 0; col < S; ++col) {
      const float u = static_cast<float>(col) / (S - 1);
      const float v = static_cast<float>(r) / (S - 1);
      for (int c = 0; c < 3; ++c) {
        float val = p.color_mean[c] + lat.color_jitter[c] +
                    p.color_spread * sample_grid(lat.noise_grid, lat.grid, c, u, v);
        img.at(c, r, col) = val;
      }
    }
  }
  for (const auto& b : lat.blobs) {
    const float bx = b.cx * S, by = b.cy * S, br = b.radius * S;
    const int r0 = std::max(0, static_cast<int>(by - br - 1));
    const int r1 = std::min(S - 1, static_cast<int>(by + br + 1));
    const int c0 = std::max(0, static_cast<int>(bx - br - 1));
    const int c1 = std::min(S - 1, static_cast<int>(bx + br + 1));
    for (int r = r0; r <= r1; ++r) {
      for (int col = c0; col <= c1; ++col) {
        const float d2 = (r - by) * (r - by) + (col - bx) * (col - bx);
        if (d2 > br * br) continue;
        const float w = 1.0f - std::sqrt(d2) / br;  // soft disc
        for (int c = 0; c < 3; ++c) img.at(c, r, col) += w * b.delta[c];
      }
    }
  }
  if (view == View::SEC) {
    // layered core: concentric modulation plus a darker nucleus
    const float cx = S * 0.5f, cy = S * 0.5f;
    const float period = lat.ring_period * S;
    const float nucleus = 0.15f * S;
    for (int r = 0; r < S; ++r) {
      for (int col = 0; col < S; ++col) {
        const float rad = std::sqrt((r - cy) * (r - cy) + (col - cx) * (col - cx));
        float f = 1.0f + 0.22f * std::sin(6.2831853f * rad / period + lat.ring_phase);
        if (rad < nucleus) f *= 0.75f + 0.25f * (rad / nucleus);
        for (int c = 0; c < 3; ++c) img.at(c, r, col) *= f;
      }
    }
  }
  // fine sensor-style grain: the sharp detail that the endoscope-like
  // degradation blurs away, so the Laplacian proxy separates the domains
  Rng grain_rng(mix_seed(spec.seed, "grain:" + frag + ":" + view_name(view)));
  std::normal_distribution<float> grain(0.0f, 0.02f);
  for (auto& v : img.chw) v += grain(grain_rng);
  for (auto& v : img.chw) v = std::clamp(v, 0.02f, 0.98f);
  const auto frag_for_deg = frag + ":" + view_name(view);
  Rng deg_rng(mix_seed(spec.seed, "degrade:" + frag_for_deg));
  degrade(img, spec, deg_rng);
  return img;
}

DatasetManifest generate_dataset(const SynthSpec& spec, const std::filesystem::path& out) {
  validate_spec(spec);
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  if (!std::filesystem::exists(out / "images")) {
    fail("unwritable_path", "cannot create " + (out / "images").string());
  }
  const auto class_names = default_class_names(spec.num_classes);
  DatasetManifest m;
  m.dataset_id = "synth-" + spec.domain_tag;
  m.class_names = class_names;
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int f = 0; f < spec.images_per_class_per_view; ++f) {
      for (View view : {View::SUR, View::SEC}) {
        Image img = render_image(spec, c, f, view);
        const std::string id = fragment_id(class_names[c], f) + "-" + view_name(view);
        const auto path = out / "images" / (id + ".png");
        save_image(img, path);
        ImageEntry e;
        e.image_id = id;
        e.path = path;
        e.view = view;
        e.class_label = class_names[c];
        e.width = spec.image_size;
        e.height = spec.image_size;
        m.entries.push_back(std::move(e));
      }
    }
  }
  save_manifest(m, out / "manifest.csv");
  std::ofstream side(out / "synthspec.json");
  side << spec_to_json(spec) << "\n";
  return m;
}

std::pair<DatasetManifest, DatasetManifest> two_domain_pair(
    const SynthSpec& spec_a, const SynthSpec& spec_b, const std::filesystem::path& out_a,
    const std::filesystem::path& out_b) {
  if (spec_a.num_classes != spec_b.num_classes) {
    fail("class_count_mismatch", "domain specs must share the class count");
  }
  auto ma = generate_dataset(spec_a, out_a);
  auto mb = generate_dataset(spec_b, out_b);
  return {std::move(ma), std::move(mb)};
}

std::string spec_to_json(const SynthSpec& spec) {
  json j;
  j["num_classes"] = spec.num_classes;
  j["images_per_class_per_view"] = spec.images_per_class_per_view;
  j["image_size"] = spec.image_size;
  j["view_correlation"] = spec.view_correlation;
  j["seed"] = spec.seed;
  j["domain_tag"] = spec.domain_tag;
  j["degradation_strength"] = spec.degradation_strength;
  j["degrade"] = {{"blur_sigma", spec.degrade.blur_sigma},
                  {"noise_std", spec.degrade.noise_std},
                  {"vignette", spec.degrade.vignette},
                  {"contrast_jitter", spec.degrade.contrast_jitter}};
  j["texture_params"] = json::array();
  for (const auto& p : spec.texture_params) {
    j["texture_params"].push_back({{"color_mean", p.color_mean},
                                   {"color_spread", p.color_spread},
                                   {"freq_lo", p.freq_lo},
                                   {"freq_hi", p.freq_hi},
                                   {"blob_density", p.blob_density}});
  }
  return j.dump(2);
}

SynthSpec spec_from_json(const std::string& text) {
  json j = json::parse(text);
  SynthSpec spec;
  spec.num_classes = j.at("num_classes").get<int>();
  spec.images_per_class_per_view = j.at("images_per_class_per_view").get<int>();
  spec.image_size = j.at("image_size").get<int>();
  spec.view_correlation = j.at("view_correlation").get<float>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.domain_tag = j.at("domain_tag").get<std::string>();
  spec.degradation_strength = j.at("degradation_strength").get<float>();
  const auto& d = j.at("degrade");
  spec.degrade.blur_sigma = d.at("blur_sigma").get<float>();
  spec.degrade.noise_std = d.at("noise_std").get<float>();
  spec.degrade.vignette = d.at("vignette").get<float>();
  spec.degrade.contrast_jitter = d.at("contrast_jitter").get<float>();
  for (const auto& pj : j.at("texture_params")) {
    ClassTextureParams p;
    p.color_mean = pj.at("color_mean").get<std::array<float, 3>>();
    p.color_spread = pj.at("color_spread").get<float>();
    p.freq_lo = pj.at("freq_lo").get<float>();
    p.freq_hi = pj.at("freq_hi").get<float>();
    p.blob_density = pj.at("blob_density").get<float>();
    spec.texture_params.push_back(p);
  }
  validate_spec(spec);
  return spec;
}

double laplacian_variance(const Image& img) {
  const int H = img.height, W = img.width;
  std::vector<float> gray(static_cast<std::size_t>(H) * W);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      gray[static_cast<std::size_t>(r) * W + c] =
          (img.at(0, r, c) + img.at(1, r, c) + img.at(2, r, c)) / 3.0f;
    }
  }
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (int r = 1; r + 1 < H; ++r) {
    for (int c = 1; c + 1 < W; ++c) {
      const double v = -4.0 * gray[static_cast<std::size_t>(r) * W + c] +
                       gray[static_cast<std::size_t>(r - 1) * W + c] +
                       gray[static_cast<std::size_t>(r + 1) * W + c] +
                       gray[static_cast<std::size_t>(r) * W + c - 1] +
                       gray[static_cast<std::size_t>(r) * W + c + 1];
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / n;
  return sq / n - mean * mean;
}

}  // namespace stonefuse::synth
