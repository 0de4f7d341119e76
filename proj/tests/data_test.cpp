#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "stonefuse/common.hpp"
#include "stonefuse/dataset.hpp"
#include "stonefuse/manifest.hpp"
#include "stonefuse/patch.hpp"
#include "stonefuse/rng.hpp"
#include "stonefuse/split.hpp"
#include "stonefuse/synth.hpp"
#include "test_util.hpp"

using namespace stonefuse;
using testutil::TempDir;
using testutil::fake_manifest;

namespace {

Image noisy_image(int size, std::uint64_t seed) {
  Image img = make_image(size, size);
  Rng rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : img.chw) v = d(rng);
  return img;
}

void check_channel_stats(const PatchRecord& p, double tol) {
  const std::size_t plane = static_cast<std::size_t>(p.patch_size) * p.patch_size;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = p.pixels[c * plane + i];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / plane;
    const double stddev = std::sqrt(std::max(0.0, sq / plane - mean * mean));
    CHECK(std::abs(mean) < tol);
    CHECK(std::abs(stddev - 1.0) < tol);
  }
}

}  // namespace

TEST_CASE("manifest csv round-trips") {
  TempDir tmp("manifest");
  DatasetManifest m = fake_manifest(6, 2);
  save_manifest(m, tmp.path() / "manifest.csv");
  DatasetManifest back = load_manifest(tmp.path() / "manifest.csv");
  REQUIRE(back.entries.size() == m.entries.size());
  CHECK(back.class_names == m.class_names);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(back.entries[i].image_id == m.entries[i].image_id);
    CHECK(back.entries[i].view == m.entries[i].view);
    CHECK(back.entries[i].class_label == m.entries[i].class_label);
  }
}

TEST_CASE("non-six class manifests need the explicit opt-in") {
  TempDir tmp("manifest4");
  DatasetManifest m = fake_manifest(4, 2);
  save_manifest(m, tmp.path() / "manifest.csv");
  CHECK_THROWS_AS(load_manifest(tmp.path() / "manifest.csv"), Error);
  CHECK_NOTHROW(load_manifest(tmp.path() / "manifest.csv", true));
}

TEST_CASE("fragment identity strips the view suffix") {
  CHECK(fragment_of("C2-f7-SUR") == "C2-f7");
  CHECK(fragment_of("C2-f7-SEC") == "C2-f7");
  CHECK(fragment_of("plain-id") == "plain-id");
}

TEST_CASE("splits partition images and keep every stratum populated") {
  DatasetManifest m = fake_manifest(4, 5);
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 1234ull}) {
    SplitAssignment s = make_split(m, 0.7, 0.1, seed);

    std::set<std::string> all;
    for (const auto& id : s.train_image_ids) all.insert(id);
    for (const auto& id : s.val_image_ids) all.insert(id);
    for (const auto& id : s.test_image_ids) all.insert(id);
    CHECK(all.size() == m.entries.size());
    CHECK(s.train_image_ids.size() + s.val_image_ids.size() + s.test_image_ids.size() ==
          m.entries.size());

    // every (class, view) stratum lands in both train and test
    for (const auto& cls : m.class_names) {
      for (auto view : {View::SUR, View::SEC}) {
        int n_train = 0, n_test = 0;
        for (const auto& e : m.entries) {
          if (e.class_label != cls || e.view != view) continue;
          n_train += s.train_image_ids.count(e.image_id);
          n_test += s.test_image_ids.count(e.image_id);
        }
        CHECK(n_train >= 1);
        CHECK(n_test >= 1);
      }
    }
    CHECK_NOTHROW(validate_split(m, s));
  }
}

TEST_CASE("splits are deterministic in the seed") {
  DatasetManifest m = fake_manifest(6, 4);
  SplitAssignment a = make_split(m, 0.7, 0.1, 9);
  SplitAssignment b = make_split(m, 0.7, 0.1, 9);
  CHECK(a.train_image_ids == b.train_image_ids);
  CHECK(a.val_image_ids == b.val_image_ids);
  CHECK(a.test_image_ids == b.test_image_ids);
  SplitAssignment c = make_split(m, 0.7, 0.1, 10);
  CHECK(a.test_image_ids != c.test_image_ids);
}

TEST_CASE("split json round-trips") {
  TempDir tmp("split");
  DatasetManifest m = fake_manifest(4, 3);
  SplitAssignment s = make_split(m, 0.7, 0.1, 3);
  save_split(s, tmp.path() / "split.json");
  SplitAssignment back = load_split(tmp.path() / "split.json");
  CHECK(back.train_image_ids == s.train_image_ids);
  CHECK(back.val_image_ids == s.val_image_ids);
  CHECK(back.test_image_ids == s.test_image_ids);
  CHECK(back.seed == s.seed);
}

TEST_CASE("undersized strata are rejected") {
  DatasetManifest m = fake_manifest(3, 1);  // one image per (class, view)
  CHECK_THROWS_AS(make_split(m, 0.7, 0.1, 0), Error);
}

TEST_CASE("patch extraction is deterministic and stays in bounds") {
  Image img = noisy_image(48, 5);
  ImageEntry e;
  e.image_id = "C0-f0-SUR";
  e.view = View::SUR;
  e.class_label = "C0";
  e.width = e.height = 48;

  auto a = extract_patches_from(img, e, 16, 25, 77);
  auto b = extract_patches_from(img, e, 16, 25, 77);
  REQUIRE(a.size() == 25);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].origin_row == b[i].origin_row);
    CHECK(a[i].origin_col == b[i].origin_col);
    CHECK(a[i].pixels == b[i].pixels);
    CHECK(a[i].origin_row >= 0);
    CHECK(a[i].origin_col >= 0);
    CHECK(a[i].origin_row + 16 <= 48);
    CHECK(a[i].origin_col + 16 <= 48);
    // pixel payload equals the source window
    for (int r = 0; r < 16; ++r) {
      for (int col = 0; col < 16; ++col) {
        CHECK(a[i].pixels[(0 * 16 + r) * 16 + col] ==
              img.at(0, a[i].origin_row + r, a[i].origin_col + col));
      }
    }
  }
  auto c = extract_patches_from(img, e, 16, 25, 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < c.size(); ++i) {
    any_diff |= (a[i].origin_row != c[i].origin_row || a[i].origin_col != c[i].origin_col);
  }
  CHECK(any_diff);
}

TEST_CASE("whitening reaches zero mean unit std per channel") {
  Image img = noisy_image(32, 6);
  ImageEntry e;
  e.image_id = "C1-f0-SEC";
  e.view = View::SEC;
  e.class_label = "C1";
  e.width = e.height = 32;
  for (auto& p : extract_patches_from(img, e, 16, 10, 3)) {
    PatchRecord w = whiten_patch(p);
    CHECK(w.whitened);
    check_channel_stats(w, 1e-5);
    CHECK_THROWS_AS(whiten_patch(w), Error);  // double whitening
  }
}

TEST_CASE("constant channels cannot be whitened") {
  PatchRecord p;
  p.patch_id = "flat";
  p.patch_size = 8;
  p.pixels.assign(3 * 8 * 8, 0.25f);
  CHECK_THROWS_AS(whiten_patch(p), Error);
}

TEST_CASE("dataset-scope whitening applies the given statistics") {
  PatchRecord p;
  p.patch_id = "ds";
  p.patch_size = 4;
  p.pixels.resize(3 * 16);
  for (std::size_t i = 0; i < p.pixels.size(); ++i) p.pixels[i] = 0.01f * i;
  const double mean[3] = {0.5, 0.2, 0.1};
  const double stddev[3] = {2.0, 1.0, 0.5};
  PatchRecord w = whiten_patch_with(p, mean, stddev);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 16; ++i) {
      const double expect = (p.pixels[c * 16 + i] - mean[c]) / stddev[c];
      CHECK(w.pixels[c * 16 + i] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("patch dataset build hits exact quotas and survives a disk round-trip") {
  TempDir tmp("build");
  synth::SynthSpec spec = synth::default_spec(4, 4, 64, 21);
  DatasetManifest m = synth::generate_dataset(spec, tmp.path() / "data");

  SplitAssignment split = make_split(m, 0.7, 0.1, 21);
  BuildOptions opts;
  opts.patch_size = 16;
  opts.total_patches = 320;
  opts.rng_seed = 21;
  opts.trainval_fraction = 0.8;
  auto [trainval, test] = build_patch_dataset(m, split, opts);

  CHECK(trainval.records.size() == 256);
  CHECK(test.records.size() == 64);
  CHECK(trainval.role == Role::TRAINVAL);
  CHECK(test.role == Role::TEST);

  // exact per-class and per-class-per-view counts in both roles
  for (const auto* ds : {&trainval, &test}) {
    const int per_class = static_cast<int>(ds->records.size()) / 4;
    for (const auto& cls : m.class_names) {
      int n = 0, n_sur = 0;
      for (const auto& r : ds->records) {
        if (r.class_label != cls) continue;
        ++n;
        n_sur += (r.view == View::SUR);
      }
      CHECK(n == per_class);
      CHECK(n_sur == per_class / 2);
    }
  }

  // group safety: no source image crosses roles
  std::set<std::string> tv_sources, test_sources;
  for (const auto& r : trainval.records) {
    tv_sources.insert(r.source_image_id);
    CHECK(split.in_trainval(r.source_image_id));
  }
  for (const auto& r : test.records) {
    test_sources.insert(r.source_image_id);
    CHECK(split.in_test(r.source_image_id));
  }
  for (const auto& id : test_sources) CHECK(tv_sources.count(id) == 0);

  // every emitted patch is whitened
  for (const auto& r : trainval.records) {
    CHECK(r.whitened);
    check_channel_stats(r, 1e-5);
  }

  // archive round-trip preserves the content digest
  save_patch_archive(trainval, split, tmp.path() / "tv");
  PatchDataset back = load_patch_archive(tmp.path() / "tv");
  CHECK(back.records.size() == trainval.records.size());
  CHECK(dataset_content_digest(back) == dataset_content_digest(trainval));
  SplitAssignment split_back = load_archive_split(tmp.path() / "tv");
  CHECK(split_back.train_image_ids == split.train_image_ids);

  // identical inputs give byte-identical builds
  auto [tv2, test2] = build_patch_dataset(m, split, opts);
  CHECK(dataset_content_digest(tv2) == dataset_content_digest(trainval));
  CHECK(dataset_content_digest(test2) == dataset_content_digest(test));

  const std::string summary = dataset_summary_json(trainval, test);
  CHECK(summary.find("\"trainval\"") != std::string::npos);
}
