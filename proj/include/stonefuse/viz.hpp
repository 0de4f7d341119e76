#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stonefuse/dataset.hpp"
#include "stonefuse/fusion.hpp"
#include "stonefuse/train.hpp"

namespace stonefuse::viz {

struct EmbeddingSet {
  std::vector<std::vector<float>> points;  // one row per sample
  std::vector<std::string> labels;
  std::vector<std::string> views;  // SUR | SEC | MIX per sample
  std::vector<std::string> patch_ids;
  int dim = 0;
};

// Backbone embeddings of every patch in the dataset (inference mode).
EmbeddingSet extract_embeddings(transfer::SingleViewModel& model, const PatchDataset& ds,
                                int batch_size);

// Fused embeddings for view pairs.
EmbeddingSet extract_fused_embeddings(fusion::MultiViewModel& model,
                                      const std::vector<fusion::PairedSample>& pairs,
                                      const std::vector<std::string>& class_names,
                                      int batch_size);

struct ReduceOptions {
  std::string method = "umap";  // umap | pca
  int n_neighbors = 15;
  double min_dist = 0.1;
  int epochs = 200;
  std::uint64_t seed = 0;
};

struct Reduction {
  std::vector<std::array<double, 2>> coords;
  std::string method_used;  // "pca" when the sample count is too small for umap
};

// 2-d projection of the embeddings: PCA (exact, via the Gram matrix), or a
// UMAP-style neighbour-graph layout initialized from the PCA solution.
Reduction reduce_2d(const EmbeddingSet& emb, const ReduceOptions& opts);

// Mean silhouette score of the projected points under their class labels.
double silhouette_score(const std::vector<std::array<double, 2>>& coords,
                        const std::vector<std::string>& labels);

// Writes scatter.png (one color per class, with a legend) and points.csv
// (patch_id,label,x,y) into out_dir.
void emit_scatter(const Reduction& red, const EmbeddingSet& emb,
                  const std::filesystem::path& out_dir, const std::string& title);

}  // namespace stonefuse::viz
