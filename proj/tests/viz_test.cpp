#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#define STONEFUSE_TESTUTIL_BUILD
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "stonefuse/common.hpp"
#include "stonefuse/viz.hpp"
#include "test_util.hpp"

using namespace stonefuse;
using testutil::TempDir;

namespace {

// Two well-separated gaussian blobs in `dim` dimensions.
viz::EmbeddingSet two_blobs(int per_class, int dim, unsigned seed) {
  viz::EmbeddingSet emb;
  emb.dim = dim;
  std::mt19937 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.3f);
  for (int cls = 0; cls < 2; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      std::vector<float> p(dim);
      for (int d = 0; d < dim; ++d) p[d] = (cls ? 4.0f : -4.0f) + noise(rng);
      emb.points.push_back(std::move(p));
      emb.labels.push_back(cls ? "B" : "A");
      emb.views.push_back(cls ? "SEC" : "SUR");
      emb.patch_ids.push_back("p" + std::to_string(cls) + "-" + std::to_string(i));
    }
  }
  return emb;
}

}  // namespace

TEST_CASE("pca projection is deterministic and centers the data") {
  viz::EmbeddingSet emb = two_blobs(20, 6, 1);
  viz::ReduceOptions opts;
  opts.method = "pca";
  viz::Reduction a = viz::reduce_2d(emb, opts);
  viz::Reduction b = viz::reduce_2d(emb, opts);
  REQUIRE(a.coords.size() == emb.points.size());
  CHECK(a.method_used == "pca");
  for (std::size_t i = 0; i < a.coords.size(); ++i) {
    CHECK(a.coords[i][0] == b.coords[i][0]);
    CHECK(a.coords[i][1] == b.coords[i][1]);
  }
  double mx = 0.0, my = 0.0;
  for (const auto& c : a.coords) {
    mx += c[0];
    my += c[1];
  }
  CHECK(std::abs(mx / a.coords.size()) < 1e-4);
  CHECK(std::abs(my / a.coords.size()) < 1e-4);
}

TEST_CASE("pca puts the dominant direction on the first axis") {
  // points on a noisy 1-d line embedded in 5-d: nearly all variance on axis 0
  viz::EmbeddingSet emb;
  emb.dim = 5;
  std::mt19937 rng(2);
  std::normal_distribution<float> noise(0.0f, 0.01f);
  for (int i = 0; i < 50; ++i) {
    std::vector<float> p(5, 0.0f);
    const float t = static_cast<float>(i) / 10.0f;
    for (int d = 0; d < 5; ++d) p[d] = t * (d + 1) + noise(rng);
    emb.points.push_back(std::move(p));
    emb.labels.push_back("A");
    emb.views.push_back("SUR");
    emb.patch_ids.push_back("p" + std::to_string(i));
  }
  viz::ReduceOptions opts;
  opts.method = "pca";
  viz::Reduction r = viz::reduce_2d(emb, opts);
  double var0 = 0.0, var1 = 0.0;
  for (const auto& c : r.coords) {
    var0 += c[0] * c[0];
    var1 += c[1] * c[1];
  }
  CHECK(var1 < 0.01 * var0);
}

TEST_CASE("umap keeps separated clusters separated") {
  viz::EmbeddingSet emb = two_blobs(30, 10, 3);
  viz::ReduceOptions opts;
  opts.method = "umap";
  opts.n_neighbors = 10;
  opts.epochs = 100;
  opts.seed = 3;
  viz::Reduction r = viz::reduce_2d(emb, opts);
  CHECK(r.method_used == "umap");
  CHECK(viz::silhouette_score(r.coords, emb.labels) > 0.5);

  // deterministic under the seed
  viz::Reduction r2 = viz::reduce_2d(emb, opts);
  for (std::size_t i = 0; i < r.coords.size(); ++i) {
    CHECK(r.coords[i][0] == doctest::Approx(r2.coords[i][0]).epsilon(1e-12));
    CHECK(r.coords[i][1] == doctest::Approx(r2.coords[i][1]).epsilon(1e-12));
  }
}

TEST_CASE("tiny sample counts fall back to pca") {
  viz::EmbeddingSet emb = two_blobs(4, 6, 4);  // 8 points, fewer than n_neighbors+1
  viz::ReduceOptions opts;
  opts.method = "umap";
  opts.n_neighbors = 15;
  viz::Reduction r = viz::reduce_2d(emb, opts);
  CHECK(r.method_used == "pca");
}

TEST_CASE("silhouette separates good and bad clusterings") {
  std::vector<std::array<double, 2>> coords;
  std::vector<std::string> labels;
  for (int i = 0; i < 10; ++i) {
    coords.push_back({-5.0 + 0.01 * i, 0.0});
    labels.push_back("A");
    coords.push_back({5.0 + 0.01 * i, 0.0});
    labels.push_back("B");
  }
  CHECK(viz::silhouette_score(coords, labels) > 0.9);

  // split each blob between the two labels: the clustering becomes worthless
  std::vector<std::string> mixed = labels;
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    mixed[i] = (i < mixed.size() / 2) ? "A" : "B";
  }
  CHECK(viz::silhouette_score(coords, mixed) < 0.1);
}

TEST_CASE("scatter export writes the png and the csv with per-sample views") {
  TempDir tmp("scatter");
  viz::EmbeddingSet emb = two_blobs(10, 4, 5);
  viz::ReduceOptions opts;
  opts.method = "pca";
  viz::Reduction r = viz::reduce_2d(emb, opts);
  viz::emit_scatter(r, emb, tmp.path(), "demo");

  CHECK(std::filesystem::exists(tmp.path() / "scatter.png"));
  CHECK(std::filesystem::file_size(tmp.path() / "scatter.png") > 0);

  std::ifstream csv(tmp.path() / "points.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  CHECK(header == "patch_id,label,view,x,y");
  int rows = 0;
  std::string line;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 20);
}

TEST_CASE("embedding extraction rejects empty datasets") {
  transfer::SingleViewModel model =
      transfer::SingleViewModel::create("smallnet", {"C0", "C1"}, 1);
  PatchDataset empty;
  empty.class_names = {"C0", "C1"};
  empty.patch_size = 16;
  CHECK_THROWS_AS(viz::extract_embeddings(model, empty, 8), Error);
}

TEST_CASE("extracted embeddings carry labels, views and ids") {
  TempDir tmp("emb");
  auto b = testutil::small_build(tmp.path() / "d", 2, 3, 32, 16, 64, 29);
  transfer::SingleViewModel model =
      transfer::SingleViewModel::create("smallnet", b.trainval.class_names, 2);
  viz::EmbeddingSet emb = viz::extract_embeddings(model, b.test, 8);
  CHECK(emb.points.size() == b.test.records.size());
  CHECK(emb.dim == model.backbone.embedding_dim());
  for (std::size_t i = 0; i < emb.points.size(); ++i) {
    CHECK(emb.labels[i] == b.test.records[i].class_label);
    CHECK(emb.views[i] == view_name(b.test.records[i].view));
    CHECK(emb.patch_ids[i] == b.test.records[i].patch_id);
  }
}
