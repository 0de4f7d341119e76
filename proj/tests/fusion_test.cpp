#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#define STONEFUSE_TESTUTIL_BUILD
#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "stonefuse/common.hpp"
#include "stonefuse/fusion.hpp"
#include "test_util.hpp"

using namespace stonefuse;
using testutil::TempDir;

namespace {

std::vector<float> random_vec(std::mt19937& rng, std::size_t n) {
  std::uniform_real_distribution<float> d(-5.0f, 5.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

PatchRecord make_patch(const std::string& frag, View view, const std::string& cls,
                       int idx) {
  PatchRecord p;
  p.source_image_id = frag + "-" + view_name(view);
  p.patch_id = p.source_image_id + "#" + std::to_string(idx);
  p.view = view;
  p.class_label = cls;
  p.patch_size = 4;
  p.pixels.assign(3 * 16, 0.0f);
  return p;
}

}  // namespace

TEST_CASE("fusion specs validate their fields") {
  fusion::FusionSpec ok;
  CHECK_NOTHROW(ok.validate());

  fusion::FusionSpec bad_method;
  bad_method.method = "sum";
  CHECK_THROWS_AS(bad_method.validate(), Error);

  fusion::FusionSpec gated_concat;
  gated_concat.method = "concat";
  gated_concat.attention = "last";
  CHECK_THROWS_AS(gated_concat.validate(), Error);

  fusion::FusionSpec bad_pairing;
  bad_pairing.pairing = "tiled";
  CHECK_THROWS_AS(bad_pairing.validate(), Error);

  fusion::FusionSpec gated;
  gated.method = "maxpool";
  gated.attention = "last2";
  fusion::FusionSpec back = fusion::FusionSpec::from_json(gated.to_json());
  CHECK(back.method == "maxpool");
  CHECK(back.attention == "last2");
  CHECK(back.pairing == "paired");
}

TEST_CASE("concat fusion is injective and maxpool obeys lattice laws") {
  std::mt19937 rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 24;
    const auto a = random_vec(rng, n);
    const auto b = random_vec(rng, n);
    const auto c = random_vec(rng, n);

    // concat: both halves recoverable, so distinct inputs stay distinct
    const auto cat = fusion::fuse_concat(a, b);
    REQUIRE(cat.size() == 2 * n);
    CHECK(std::equal(a.begin(), a.end(), cat.begin()));
    CHECK(std::equal(b.begin(), b.end(), cat.begin() + n));

    // maxpool: commutative, idempotent, monotone
    CHECK(fusion::fuse_maxpool(a, b) == fusion::fuse_maxpool(b, a));
    CHECK(fusion::fuse_maxpool(a, a) == a);
    const auto m = fusion::fuse_maxpool(a, b);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(m[i] >= a[i]);
      CHECK(m[i] >= b[i]);
    }
    // monotonicity: raising an input never lowers the fused output
    auto a_up = a;
    for (auto& x : a_up) x += 0.5f;
    const auto m_up = fusion::fuse_maxpool(a_up, b);
    for (std::size_t i = 0; i < n; ++i) CHECK(m_up[i] >= m[i]);
  }
  CHECK_THROWS_AS(fusion::fuse_concat({1.0f}, {1.0f, 2.0f}), Error);
  CHECK_THROWS_AS(fusion::fuse_maxpool({1.0f}, {1.0f, 2.0f}), Error);
}

TEST_CASE("pairing matches fragments first and stays within classes") {
  std::vector<PatchRecord> storage;
  for (const std::string& cls : {"C0", "C1"}) {
    for (int f = 0; f < 3; ++f) {
      const std::string frag = cls + "-f" + std::to_string(f);
      for (int i = 0; i < 4; ++i) storage.push_back(make_patch(frag, View::SUR, cls, i));
      for (int i = 0; i < 4; ++i) storage.push_back(make_patch(frag, View::SEC, cls, i));
    }
  }
  std::vector<const PatchRecord*> recs;
  for (const auto& p : storage) recs.push_back(&p);

  auto pairs = fusion::pair_samples(recs, {"C0", "C1"}, 3);
  CHECK(pairs.size() == storage.size() / 2);
  std::set<const PatchRecord*> used_sur, used_sec;
  for (const auto& p : pairs) {
    CHECK(p.sur->view == View::SUR);
    CHECK(p.sec->view == View::SEC);
    CHECK(p.sur->class_label == p.sec->class_label);
    // fully paired fragments: every pair is fragment-consistent
    CHECK(fragment_of(p.sur->source_image_id) == fragment_of(p.sec->source_image_id));
    CHECK(used_sur.insert(p.sur).second);  // each patch used once
    CHECK(used_sec.insert(p.sec).second);
  }

  // same seed reproduces the same pairing
  auto again = fusion::pair_samples(recs, {"C0", "C1"}, 3);
  REQUIRE(again.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(again[i].sur == pairs[i].sur);
    CHECK(again[i].sec == pairs[i].sec);
  }
}

TEST_CASE("uneven views pair up to the smaller count, missing views are an error") {
  std::vector<PatchRecord> storage;
  for (int i = 0; i < 6; ++i) storage.push_back(make_patch("C0-f0", View::SUR, "C0", i));
  for (int i = 0; i < 4; ++i) storage.push_back(make_patch("C0-f1", View::SEC, "C0", i));
  std::vector<const PatchRecord*> recs;
  for (const auto& p : storage) recs.push_back(&p);

  // no shared fragment: the class still pairs randomly, dropping the excess
  auto pairs = fusion::pair_samples(recs, {"C0"}, 5);
  CHECK(pairs.size() == 4);

  // a class with one view only cannot be paired
  storage.push_back(make_patch("C1-f0", View::SUR, "C1", 0));
  recs.clear();
  for (const auto& p : storage) recs.push_back(&p);
  CHECK_THROWS_AS(fusion::pair_samples(recs, {"C0", "C1"}, 5), Error);
}

TEST_CASE("replicated pairing feeds the same patch to both branches") {
  std::vector<PatchRecord> storage = {make_patch("C0-f0", View::SUR, "C0", 0),
                                      make_patch("C1-f0", View::SEC, "C1", 0)};
  std::vector<const PatchRecord*> recs = {&storage[0], &storage[1]};
  auto pairs = fusion::pair_samples(recs, {"C0", "C1"}, 0, "replicated");
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].sur == pairs[0].sec);
  CHECK(pairs[0].label == 0);
  CHECK(pairs[1].sur == pairs[1].sec);
  CHECK(pairs[1].label == 1);
}

TEST_CASE("paired data splits by image group") {
  TempDir tmp("paired");
  auto b = testutil::small_build(tmp.path() / "d", 2, 10, 32, 16, 200, 19);
  fusion::PairedData data = fusion::make_paired_data(b.trainval, b.split, 19);
  CHECK_FALSE(data.train.empty());
  CHECK_FALSE(data.val.empty());
  CHECK(data.patch_size == 16);
  for (const auto& p : data.train) {
    CHECK(b.split.train_image_ids.count(p.sur->source_image_id));
    CHECK(b.split.train_image_ids.count(p.sec->source_image_id));
  }
  for (const auto& p : data.val) {
    CHECK(b.split.val_image_ids.count(p.sur->source_image_id));
    CHECK(b.split.val_image_ids.count(p.sec->source_image_id));
  }
}
