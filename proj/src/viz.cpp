#include "stonefuse/viz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <Eigen/Dense>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "stonefuse/common.hpp"
#include "stonefuse/rng.hpp"

namespace stonefuse::viz {

EmbeddingSet extract_embeddings(transfer::SingleViewModel& model, const PatchDataset& ds,
                                int batch_size) {
  EmbeddingSet out;
  out.dim = model.backbone.embedding_dim();
  if (ds.records.empty()) fail("empty_dataset", "no patches to embed");
  std::vector<const PatchRecord*> recs;
  for (const auto& r : ds.records) recs.push_back(&r);
  for (std::size_t start = 0; start < recs.size(); start += batch_size) {
    const std::size_t end = std::min(recs.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor batch =
        transfer::batch_from_patches(recs, idx, ds.patch_size, nullptr, nullptr);
    StageFeatures f = model.backbone.forward_features(batch, false);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = f.embedding.data() + i * out.dim;
      out.points.emplace_back(row, row + out.dim);
      out.labels.push_back(recs[idx[i]]->class_label);
      out.views.push_back(view_name(recs[idx[i]]->view));
      out.patch_ids.push_back(recs[idx[i]]->patch_id);
    }
  }
  return out;
}

EmbeddingSet extract_fused_embeddings(fusion::MultiViewModel& model,
                                      const std::vector<fusion::PairedSample>& pairs,
                                      const std::vector<std::string>& class_names,
                                      int batch_size) {
  EmbeddingSet out;
  out.dim = model.fused_dim();
  if (pairs.empty()) fail("empty_dataset", "no pairs to embed");
  const int patch_size = pairs.front().sur->patch_size;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto [xs, xc] = fusion::pair_batches(pairs, idx, patch_size);
    Tensor emb = model.embed(xs, xc);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = emb.data() + i * out.dim;
      out.points.emplace_back(row, row + out.dim);
      out.labels.push_back(class_names.at(pairs[idx[i]].label));
      out.views.push_back("MIX");
      out.patch_ids.push_back(pairs[idx[i]].sur->patch_id + "+" +
                              pairs[idx[i]].sec->patch_id);
    }
  }
  return out;
}

namespace {

// Exact 2-component PCA; works in whichever of feature or sample space is
// smaller.
std::vector<std::array<double, 2>> pca_2d(const EmbeddingSet& emb) {
  const int n = static_cast<int>(emb.points.size());
  const int d = emb.dim;
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) X(i, j) = emb.points[i][j];
  }
  X.rowwise() -= X.colwise().mean();
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  if (n < 2 || d < 1) return out;
  Eigen::MatrixXd proj;
  if (d <= n) {
    Eigen::MatrixXd cov = X.transpose() * X / std::max(1, n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const int top = cov.cols() - 1;
    Eigen::MatrixXd basis(d, 2);
    basis.col(0) = es.eigenvectors().col(top);
    basis.col(1) = d > 1 ? es.eigenvectors().col(top - 1) : es.eigenvectors().col(top);
    proj = X * basis;
  } else {
    Eigen::MatrixXd gram = X * X.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    const int top = gram.cols() - 1;
    proj.resize(n, 2);
    proj.col(0) = es.eigenvectors().col(top) * std::sqrt(std::max(0.0, es.eigenvalues()(top)));
    const int second = std::max(0, top - 1);
    proj.col(1) =
        es.eigenvectors().col(second) * std::sqrt(std::max(0.0, es.eigenvalues()(second)));
  }
  for (int i = 0; i < n; ++i) out[i] = {proj(i, 0), proj(i, 1)};
  return out;
}

struct Edge {
  int a, b;
  double weight;
};

}  // namespace

Reduction reduce_2d(const EmbeddingSet& emb, const ReduceOptions& opts) {
  if (opts.method != "umap" && opts.method != "pca") {
    fail("bad_config", "unknown reduction method: " + opts.method);
  }
  Reduction red;
  const int n = static_cast<int>(emb.points.size());
  red.coords = pca_2d(emb);
  if (opts.method == "pca" || n <= opts.n_neighbors + 1) {
    red.method_used = "pca";
    return red;
  }
  red.method_used = "umap";

  // exact kNN on the raw embeddings
  const int k = opts.n_neighbors;
  std::vector<std::vector<std::pair<double, int>>> knn(n);
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> dist;
    dist.reserve(n - 1);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (int c = 0; c < emb.dim; ++c) {
        const double diff = emb.points[i][c] - emb.points[j][c];
        s += diff * diff;
      }
      dist.emplace_back(std::sqrt(s), j);
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    dist.resize(k);
    knn[i] = std::move(dist);
  }

  // per-point kernel widths so the effective neighbour count is log2(k)
  const double target = std::log2(static_cast<double>(k));
  std::vector<Edge> edges;
  std::map<std::pair<int, int>, double> weight;
  for (int i = 0; i < n; ++i) {
    const double rho = knn[i].front().first;
    double lo = 1e-6, hi = 1e3;
    for (int it = 0; it < 64; ++it) {
      const double sigma = 0.5 * (lo + hi);
      double sum = 0.0;
      for (const auto& [d, j] : knn[i]) sum += std::exp(-std::max(0.0, d - rho) / sigma);
      (sum > target ? hi : lo) = sigma;
    }
    const double sigma = 0.5 * (lo + hi);
    for (const auto& [d, j] : knn[i]) {
      const double w = std::exp(-std::max(0.0, d - rho) / sigma);
      const auto key = std::minmax(i, j);
      auto [it, fresh] = weight.emplace(std::make_pair(key.first, key.second), w);
      if (!fresh) it->second = it->second + w - it->second * w;  // fuzzy union
    }
  }
  for (const auto& [key, w] : weight) edges.push_back({key.first, key.second, w});

  // scale the PCA initialization to a compact range
  double span = 1e-12;
  for (const auto& c : red.coords) span = std::max({span, std::abs(c[0]), std::abs(c[1])});
  for (auto& c : red.coords) {
    c[0] = c[0] / span * 10.0;
    c[1] = c[1] / span * 10.0;
  }

  // attraction along graph edges, sampled repulsion elsewhere
  const double a = 1.577, b = 0.895;  // curve fit for min_dist ~ 0.1
  const double min_dist = opts.min_dist;
  (void)min_dist;
  Rng rng(mix_seed(opts.seed, "umap.layout"));
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto clip = [](double v) { return std::clamp(v, -4.0, 4.0); };
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const double alpha = 1.0 * (1.0 - static_cast<double>(epoch) / opts.epochs);
    for (const auto& e : edges) {
      if (unit(rng) > e.weight) continue;
      auto& p = red.coords[e.a];
      auto& q = red.coords[e.b];
      const double dx = p[0] - q[0], dy = p[1] - q[1];
      const double d2 = dx * dx + dy * dy;
      const double grad =
          -2.0 * a * b * std::pow(d2, b - 1.0) / (1.0 + a * std::pow(d2, b));
      p[0] += clip(grad * dx) * alpha;
      p[1] += clip(grad * dy) * alpha;
      q[0] -= clip(grad * dx) * alpha;
      q[1] -= clip(grad * dy) * alpha;
      for (int s = 0; s < 5; ++s) {
        const int r = pick(rng);
        if (r == e.a) continue;
        auto& z = red.coords[r];
        const double rx = p[0] - z[0], ry = p[1] - z[1];
        const double rd2 = rx * rx + ry * ry + 1e-3;
        const double rep = 2.0 * b / (rd2 * (1.0 + a * std::pow(rd2, b)));
        p[0] += clip(rep * rx) * alpha;
        p[1] += clip(rep * ry) * alpha;
      }
    }
  }
  return red;
}

double silhouette_score(const std::vector<std::array<double, 2>>& coords,
                        const std::vector<std::string>& labels) {
  const int n = static_cast<int>(coords.size());
  if (n != static_cast<int>(labels.size())) {
    fail("length_mismatch", "coords and labels differ in length");
  }
  std::map<std::string, int> counts;
  for (const auto& l : labels) ++counts[l];
  if (counts.size() < 2) return 0.0;
  double total = 0.0;
  int used = 0;
  for (int i = 0; i < n; ++i) {
    if (counts[labels[i]] < 2) continue;
    std::map<std::string, double> sum;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = coords[i][0] - coords[j][0];
      const double dy = coords[i][1] - coords[j][1];
      sum[labels[j]] += std::sqrt(dx * dx + dy * dy);
    }
    const double a = sum[labels[i]] / (counts[labels[i]] - 1);
    double bmin = std::numeric_limits<double>::infinity();
    for (const auto& [cls, s] : sum) {
      if (cls == labels[i]) continue;
      bmin = std::min(bmin, s / counts[cls]);
    }
    total += (bmin - a) / std::max(a, bmin);
    ++used;
  }
  return used ? total / used : 0.0;
}

void emit_scatter(const Reduction& red, const EmbeddingSet& emb,
                  const std::filesystem::path& out_dir, const std::string& title) {
  if (red.coords.size() != emb.labels.size()) {
    fail("length_mismatch", "reduction does not match the embedding set");
  }
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "points.csv");
    csv << "patch_id,label,view,x,y\n";
    for (std::size_t i = 0; i < red.coords.size(); ++i) {
      const std::string view = i < emb.views.size() ? emb.views[i] : "";
      csv << emb.patch_ids[i] << "," << emb.labels[i] << "," << view << ","
          << red.coords[i][0] << "," << red.coords[i][1] << "\n";
    }
  }
  std::vector<std::string> classes;
  for (const auto& l : emb.labels) {
    if (std::find(classes.begin(), classes.end(), l) == classes.end()) {
      classes.push_back(l);
    }
  }
  std::sort(classes.begin(), classes.end());
  static const cv::Scalar palette[] = {
      {180, 119, 31},  {14, 127, 255},  {44, 160, 44},  {40, 39, 214},
      {189, 103, 148}, {75, 86, 140},   {194, 119, 227}, {127, 127, 127},
      {34, 189, 188},  {207, 190, 23},
  };
  const int W = 960, H = 720, margin = 60, legend_w = 150;
  cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& c : red.coords) {
    xmin = std::min(xmin, c[0]);
    xmax = std::max(xmax, c[0]);
    ymin = std::min(ymin, c[1]);
    ymax = std::max(ymax, c[1]);
  }
  const double xr = std::max(1e-12, xmax - xmin), yr = std::max(1e-12, ymax - ymin);
  for (std::size_t i = 0; i < red.coords.size(); ++i) {
    const int px = margin + static_cast<int>((red.coords[i][0] - xmin) / xr *
                                             (W - legend_w - 2 * margin));
    const int py =
        H - margin - static_cast<int>((red.coords[i][1] - ymin) / yr * (H - 2 * margin));
    const auto ci = std::find(classes.begin(), classes.end(), emb.labels[i]) -
                    classes.begin();
    cv::circle(canvas, {px, py}, 3, palette[ci % 10], cv::FILLED, cv::LINE_AA);
  }
  cv::putText(canvas, title, {margin, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.7, {0, 0, 0}, 1,
              cv::LINE_AA);
  cv::putText(canvas, "(" + red.method_used + ")", {margin, 52}, cv::FONT_HERSHEY_SIMPLEX,
              0.5, {90, 90, 90}, 1, cv::LINE_AA);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const int y = margin + static_cast<int>(c) * 24;
    cv::circle(canvas, {W - legend_w + 10, y}, 5, palette[c % 10], cv::FILLED,
               cv::LINE_AA);
    cv::putText(canvas, classes[c], {W - legend_w + 24, y + 5}, cv::FONT_HERSHEY_SIMPLEX,
                0.5, {0, 0, 0}, 1, cv::LINE_AA);
  }
  if (!cv::imwrite((out_dir / "scatter.png").string(), canvas)) {
    fail("store_write", "cannot write scatter plot to " + out_dir.string());
  }
}

}  // namespace stonefuse::viz
