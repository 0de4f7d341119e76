#include "stonefuse/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "stonefuse/common.hpp"
#include "stonefuse/digest.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse {

using nlohmann::json;

std::string role_name(Role r) { return r == Role::TRAINVAL ? "TRAINVAL" : "TEST"; }

Role parse_role(const std::string& s) {
  if (s == "TRAINVAL") return Role::TRAINVAL;
  if (s == "TEST") return Role::TEST;
  fail("bad_role", "unknown role: " + s);
}

namespace {

struct Cell {
  std::vector<const ImageEntry*> images;  // sorted by image_id
};

std::vector<PatchRecord> build_role(const DatasetManifest& manifest,
                                    const SplitAssignment& split, Role role,
                                    int per_class_quota, const BuildOptions& opts) {
  // collect images of each (class, view) present in this role
  std::map<std::pair<std::string, View>, Cell> cells;
  for (const auto& e : manifest.entries) {
    const bool in_role = (role == Role::TRAINVAL) ? split.in_trainval(e.image_id)
                                                  : split.in_test(e.image_id);
    if (in_role) cells[{e.class_label, e.view}].images.push_back(&e);
  }
  for (auto& [key, cell] : cells) {
    std::sort(cell.images.begin(), cell.images.end(),
              [](const ImageEntry* a, const ImageEntry* b) {
                return a->image_id < b->image_id;
              });
  }
  std::vector<PatchRecord> records;
  for (const auto& cls : manifest.class_names) {
    for (View view : {View::SUR, View::SEC}) {
      // per-view share of the class quota; any odd remainder goes to SUR
      const int quota = (view == View::SUR) ? per_class_quota - per_class_quota / 2
                                            : per_class_quota / 2;
      if (quota == 0) continue;
      auto it = cells.find({cls, view});
      if (it == cells.end() || it->second.images.empty()) {
        fail("class_missing_in_role", "class " + cls + " view " + view_name(view) +
                                          " has no images in role " + role_name(role));
      }
      const auto& images = it->second.images;
      const int n_img = static_cast<int>(images.size());
      const int base = quota / n_img;
      const int rem = quota % n_img;
      for (int i = 0; i < n_img; ++i) {
        const int count = base + (i < rem ? 1 : 0);
        if (count == 0) continue;
        auto patches =
            extract_patches(*images[i], opts.patch_size, count, opts.rng_seed);
        for (auto& p : patches) records.push_back(std::move(p));
      }
    }
  }
  return records;
}

}  // namespace

std::pair<PatchDataset, PatchDataset> build_patch_dataset(const DatasetManifest& manifest,
                                                          const SplitAssignment& split,
                                                          const BuildOptions& opts) {
  validate_split(manifest, split);
  const int num_classes = static_cast<int>(manifest.class_names.size());
  if (opts.total_patches <= 0 || opts.total_patches % num_classes != 0) {
    fail("bad_budget", "total_patches must be a positive multiple of the class count");
  }
  const int per_class = opts.total_patches / num_classes;
  int trainval_per_class =
      static_cast<int>(std::lround(per_class * opts.trainval_fraction));
  trainval_per_class = std::clamp(trainval_per_class, 1, per_class - 1);
  const int test_per_class = per_class - trainval_per_class;

  PatchDataset trainval, test;
  trainval.role = Role::TRAINVAL;
  test.role = Role::TEST;
  trainval.patches_per_class = trainval_per_class;
  test.patches_per_class = test_per_class;
  trainval.patch_size = test.patch_size = opts.patch_size;
  trainval.class_names = test.class_names = manifest.class_names;
  trainval.records = build_role(manifest, split, Role::TRAINVAL, trainval_per_class, opts);
  test.records = build_role(manifest, split, Role::TEST, test_per_class, opts);

  if (opts.whiten_scope == WhitenScope::Patch) {
    for (auto* ds : {&trainval, &test}) {
      for (auto& r : ds->records) r = whiten_patch(r);
    }
  } else {
    // dataset scope: statistics from the training share only, applied to both
    double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
    std::size_t n = 0;
    const std::size_t plane =
        static_cast<std::size_t>(opts.patch_size) * opts.patch_size;
    for (const auto& r : trainval.records) {
      for (int c = 0; c < 3; ++c) {
        const float* p = r.pixels.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum[c] += p[i];
          sq[c] += static_cast<double>(p[i]) * p[i];
        }
      }
      n += plane;
    }
    double mean[3], stddev[3];
    for (int c = 0; c < 3; ++c) {
      mean[c] = sum[c] / static_cast<double>(n);
      stddev[c] = std::sqrt(std::max(0.0, sq[c] / static_cast<double>(n) - mean[c] * mean[c]));
    }
    for (auto* ds : {&trainval, &test}) {
      for (auto& r : ds->records) r = whiten_patch_with(r, mean, stddev);
    }
  }
  return {std::move(trainval), std::move(test)};
}

// ----------------------------------------------------------------- archive

void save_patch_archive(const PatchDataset& ds, const SplitAssignment& split,
                        const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream bin(dir / "patches.bin", std::ios::binary);
  std::ofstream idx(dir / "index.jsonl");
  if (!bin || !idx) fail("unwritable_path", "cannot write archive in " + dir.string());
  for (const auto& r : ds.records) {
    bin.write(reinterpret_cast<const char*>(r.pixels.data()),
              static_cast<std::streamsize>(r.pixels.size() * sizeof(float)));
    json j;
    j["patch_id"] = r.patch_id;
    j["source_image_id"] = r.source_image_id;
    j["view"] = view_name(r.view);
    j["class_label"] = r.class_label;
    j["origin"] = {r.origin_row, r.origin_col};
    j["whitened"] = r.whitened;
    idx << j.dump() << "\n";
  }
  json meta;
  meta["role"] = role_name(ds.role);
  meta["patch_size"] = ds.patch_size;
  meta["patches_per_class"] = ds.patches_per_class;
  meta["class_names"] = ds.class_names;
  meta["num_records"] = ds.records.size();
  std::ofstream m(dir / "meta.json");
  m << meta.dump(2) << "\n";
  save_split(split, dir / "split.json");
}

PatchDataset load_patch_archive(const std::filesystem::path& dir) {
  std::ifstream m(dir / "meta.json");
  if (!m) fail("missing_file", "no meta.json in " + dir.string());
  json meta;
  m >> meta;
  PatchDataset ds;
  ds.role = parse_role(meta.at("role").get<std::string>());
  ds.patch_size = meta.at("patch_size").get<int>();
  ds.patches_per_class = meta.at("patches_per_class").get<int>();
  ds.class_names = meta.at("class_names").get<std::vector<std::string>>();
  std::ifstream idx(dir / "index.jsonl");
  std::ifstream bin(dir / "patches.bin", std::ios::binary);
  if (!idx || !bin) fail("missing_file", "incomplete archive in " + dir.string());
  const std::size_t plane =
      static_cast<std::size_t>(ds.patch_size) * ds.patch_size;
  std::string line;
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PatchRecord r;
    r.patch_id = j.at("patch_id").get<std::string>();
    r.source_image_id = j.at("source_image_id").get<std::string>();
    r.view = parse_view(j.at("view").get<std::string>());
    r.class_label = j.at("class_label").get<std::string>();
    r.origin_row = j.at("origin")[0].get<int>();
    r.origin_col = j.at("origin")[1].get<int>();
    r.patch_size = ds.patch_size;
    r.whitened = j.at("whitened").get<bool>();
    r.pixels.resize(3 * plane);
    bin.read(reinterpret_cast<char*>(r.pixels.data()),
             static_cast<std::streamsize>(r.pixels.size() * sizeof(float)));
    if (bin.gcount() != static_cast<std::streamsize>(r.pixels.size() * sizeof(float))) {
      fail("corrupt_archive", "patches.bin shorter than index in " + dir.string());
    }
    ds.records.push_back(std::move(r));
  }
  return ds;
}

SplitAssignment load_archive_split(const std::filesystem::path& dir) {
  return load_split(dir / "split.json");
}

std::string dataset_content_digest(const PatchDataset& ds) {
  std::ostringstream meta;
  std::vector<std::uint8_t> bytes;
  for (const auto& r : ds.records) {
    meta << r.patch_id << "|" << r.source_image_id << "|" << view_name(r.view) << "|"
         << r.class_label << "|" << r.origin_row << "," << r.origin_col << "|"
         << r.whitened << "\n";
    const auto* p = reinterpret_cast<const std::uint8_t*>(r.pixels.data());
    bytes.insert(bytes.end(), p, p + r.pixels.size() * sizeof(float));
  }
  const std::string ms = meta.str();
  bytes.insert(bytes.end(), ms.begin(), ms.end());
  return sha256_hex(bytes);
}

std::string dataset_summary_json(const PatchDataset& trainval, const PatchDataset& test) {
  json j;
  auto count = [](const PatchDataset& ds) {
    json out;
    std::map<std::string, int> per_class;
    std::map<std::string, int> per_class_view;
    for (const auto& r : ds.records) {
      per_class[r.class_label]++;
      per_class_view[r.class_label + "/" + view_name(r.view)]++;
    }
    out["total"] = ds.records.size();
    out["per_class"] = per_class;
    out["per_class_per_view"] = per_class_view;
    return out;
  };
  j["trainval"] = count(trainval);
  j["test"] = count(test);
  j["note"] =
      "test counts are reported both per class and per class per view; a "
      "12000-patch build yields 400 test patches per class, 200 per class per view";
  return j.dump(2);
}

}  // namespace stonefuse
