#include "stonefuse/split.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <vector>

#include <json.hpp>

#include "stonefuse/common.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse {

SplitAssignment make_split(const DatasetManifest& manifest, double train_fraction,
                           double val_fraction, std::uint64_t seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    fail("bad_fraction", "train_fraction must lie in (0,1)");
  }
  if (val_fraction < 0.0 || train_fraction + val_fraction >= 1.0) {
    fail("bad_fraction", "fractions must leave a nonempty test share");
  }
  std::map<std::pair<std::string, View>, std::vector<std::string>> strata;
  for (const auto& e : manifest.entries) {
    strata[{e.class_label, e.view}].push_back(e.image_id);
  }
  SplitAssignment out;
  out.seed = seed;
  for (auto& [key, ids] : strata) {
    if (ids.size() < 2) {
      fail("stratum_too_small", "stratum " + key.first + "/" + view_name(key.second) +
                                    " has fewer than 2 images");
    }
    std::sort(ids.begin(), ids.end());
    Rng rng(mix_seed(seed, "split:" + key.first + ":" + view_name(key.second)));
    std::shuffle(ids.begin(), ids.end(), rng);
    const int n = static_cast<int>(ids.size());
    int n_test = static_cast<int>(std::lround(n * (1.0 - train_fraction - val_fraction)));
    n_test = std::clamp(n_test, 1, n - 1);
    int n_val = static_cast<int>(std::lround(n * val_fraction));
    n_val = std::clamp(n_val, 0, n - n_test - 1);
    const int n_train = n - n_test - n_val;
    int i = 0;
    for (int k = 0; k < n_train; ++k) out.train_image_ids.insert(ids[i++]);
    for (int k = 0; k < n_val; ++k) out.val_image_ids.insert(ids[i++]);
    for (int k = 0; k < n_test; ++k) out.test_image_ids.insert(ids[i++]);
  }
  return out;
}

void validate_split(const DatasetManifest& manifest, const SplitAssignment& s) {
  std::set<std::string> all;
  for (const auto& e : manifest.entries) all.insert(e.image_id);
  std::set<std::string> seen;
  auto check = [&](const std::set<std::string>& ids, const char* role) {
    for (const auto& id : ids) {
      if (!all.count(id)) fail("split_mismatch", std::string(role) + " id " + id +
                                                     " not in manifest");
      if (!seen.insert(id).second) {
        fail("split_overlap", "image " + id + " assigned to multiple roles");
      }
    }
  };
  check(s.train_image_ids, "train");
  check(s.val_image_ids, "val");
  check(s.test_image_ids, "test");
  if (seen != all) fail("split_mismatch", "split does not cover the manifest exactly");
}

void save_split(const SplitAssignment& s, const std::filesystem::path& path) {
  nlohmann::json j;
  j["train_image_ids"] = s.train_image_ids;
  j["val_image_ids"] = s.val_image_ids;
  j["test_image_ids"] = s.test_image_ids;
  j["seed"] = s.seed;
  std::ofstream out(path);
  if (!out) fail("unwritable_path", "cannot write split " + path.string());
  out << j.dump(2) << "\n";
}

SplitAssignment load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("missing_file", "cannot open split " + path.string());
  nlohmann::json j;
  in >> j;
  SplitAssignment s;
  for (const auto& v : j.at("train_image_ids")) s.train_image_ids.insert(v.get<std::string>());
  for (const auto& v : j.at("val_image_ids")) s.val_image_ids.insert(v.get<std::string>());
  for (const auto& v : j.at("test_image_ids")) s.test_image_ids.insert(v.get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace stonefuse
