#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include "stonefuse/manifest.hpp"

namespace stonefuse {

// Group-aware partition of source images: patches of one image never span
// roles because the split happens at the image level.
struct SplitAssignment {
  std::set<std::string> train_image_ids;
  std::set<std::string> val_image_ids;
  std::set<std::string> test_image_ids;
  std::uint64_t seed = 0;

  bool in_trainval(const std::string& id) const {
    return train_image_ids.count(id) || val_image_ids.count(id);
  }
  bool in_test(const std::string& id) const { return test_image_ids.count(id) > 0; }
};

// Deterministic stratified split by (class, view) at the image level.
// Every stratum must have at least 2 images so train and test both get one.
SplitAssignment make_split(const DatasetManifest& manifest, double train_fraction,
                           double val_fraction, std::uint64_t seed);

void save_split(const SplitAssignment& s, const std::filesystem::path& path);
SplitAssignment load_split(const std::filesystem::path& path);

void validate_split(const DatasetManifest& manifest, const SplitAssignment& s);

}  // namespace stonefuse
