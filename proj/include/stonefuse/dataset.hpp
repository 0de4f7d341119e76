#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stonefuse/manifest.hpp"
#include "stonefuse/patch.hpp"
#include "stonefuse/split.hpp"

namespace stonefuse {

enum class Role { TRAINVAL, TEST };
enum class WhitenScope { Patch, Dataset };

std::string role_name(Role r);
Role parse_role(const std::string& s);

struct PatchDataset {
  std::vector<PatchRecord> records;
  Role role = Role::TRAINVAL;
  int patches_per_class = 0;
  int patch_size = 0;
  std::vector<std::string> class_names;
};

struct BuildOptions {
  int patch_size = 256;
  int total_patches = 12000;
  std::uint64_t rng_seed = 0;
  double trainval_fraction = 0.8;
  WhitenScope whiten_scope = WhitenScope::Patch;
};

// Builds the balanced, whitened, leakage-safe patch datasets. Per (class,
// view, role) quotas are exact; per-image counts within a cell differ by at
// most one (remainder assigned in image_id order).
std::pair<PatchDataset, PatchDataset> build_patch_dataset(const DatasetManifest& manifest,
                                                          const SplitAssignment& split,
                                                          const BuildOptions& opts);

// Patch archive directory: patches.bin (float32 channel-major, little-endian,
// record order), index.jsonl (one metadata object per record), split.json,
// meta.json (role, patch size, class names).
void save_patch_archive(const PatchDataset& ds, const SplitAssignment& split,
                        const std::filesystem::path& dir);
PatchDataset load_patch_archive(const std::filesystem::path& dir);
SplitAssignment load_archive_split(const std::filesystem::path& dir);

// Digest over pixel payload and index metadata; byte-identical builds agree.
std::string dataset_content_digest(const PatchDataset& ds);

// Human- and machine-readable accounting of the build (per class/view/role
// counts; notes both the per-class and per-class-per-view test counts).
std::string dataset_summary_json(const PatchDataset& trainval, const PatchDataset& test);

}  // namespace stonefuse
