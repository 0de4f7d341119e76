#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "stonefuse/manifest.hpp"

namespace testutil {

// Unique scratch directory under the system temp root, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("stonefuse-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  operator const std::filesystem::path&() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Metadata-only manifest (no image files on disk); enough for split logic.
inline stonefuse::DatasetManifest fake_manifest(int num_classes, int frags_per_class,
                                                int size = 96) {
  stonefuse::DatasetManifest m;
  m.dataset_id = "fake";
  for (int c = 0; c < num_classes; ++c) m.class_names.push_back("C" + std::to_string(c));
  for (int c = 0; c < num_classes; ++c) {
    for (int f = 0; f < frags_per_class; ++f) {
      for (auto view : {stonefuse::View::SUR, stonefuse::View::SEC}) {
        stonefuse::ImageEntry e;
        const std::string frag = m.class_names[c] + "-f" + std::to_string(f);
        e.image_id = frag + "-" + stonefuse::view_name(view);
        e.path = e.image_id + ".png";
        e.view = view;
        e.class_label = m.class_names[c];
        e.width = size;
        e.height = size;
        m.entries.push_back(e);
      }
    }
  }
  return m;
}

}  // namespace testutil

#ifdef STONEFUSE_TESTUTIL_BUILD
#include "stonefuse/dataset.hpp"
#include "stonefuse/split.hpp"
#include "stonefuse/synth.hpp"

namespace testutil {

struct SmallBuild {
  stonefuse::DatasetManifest manifest;
  stonefuse::SplitAssignment split;
  stonefuse::PatchDataset trainval;
  stonefuse::PatchDataset test;
};

// Renders a small synthetic dataset and turns it into patch datasets; the
// workhorse fixture for training/fusion tests.
inline SmallBuild small_build(const std::filesystem::path& dir, int classes, int frags,
                              int image_size, int patch_size, int total_patches,
                              std::uint64_t seed, float degradation = 0.0f) {
  SmallBuild b;
  stonefuse::synth::SynthSpec spec =
      stonefuse::synth::default_spec(classes, frags, image_size, seed);
  spec.degradation_strength = degradation;
  b.manifest = stonefuse::synth::generate_dataset(spec, dir);
  b.split = stonefuse::make_split(b.manifest, 0.7, 0.1, seed);
  stonefuse::BuildOptions opts;
  opts.patch_size = patch_size;
  opts.total_patches = total_patches;
  opts.rng_seed = seed;
  opts.trainval_fraction = 0.8;
  auto [tv, test] = stonefuse::build_patch_dataset(b.manifest, b.split, opts);
  b.trainval = std::move(tv);
  b.test = std::move(test);
  return b;
}

}  // namespace testutil
#endif  // STONEFUSE_TESTUTIL_BUILD
