#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stonefuse/common.hpp"
#include "stonefuse/metrics.hpp"
#include "test_util.hpp"

using namespace stonefuse;
using testutil::TempDir;

namespace {

// Brute-force reference: count-based precision/recall/F1 straight from the
// definitions, without touching the library's confusion-matrix plumbing.
struct OracleResult {
  double accuracy;
  std::vector<double> precision, recall, f1;
};

OracleResult oracle(const std::vector<std::string>& truths,
                    const std::vector<std::string>& preds,
                    const std::vector<std::string>& classes) {
  OracleResult r{0.0, {}, {}, {}};
  int correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) correct += (truths[i] == preds[i]);
  r.accuracy = truths.empty() ? 0.0 : static_cast<double>(correct) / truths.size();
  for (const auto& cls : classes) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      if (preds[i] == cls && truths[i] == cls) ++tp;
      if (preds[i] == cls && truths[i] != cls) ++fp;
      if (preds[i] != cls && truths[i] == cls) ++fn;
    }
    const double p = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
    r.precision.push_back(p);
    r.recall.push_back(rec);
    r.f1.push_back((p + rec) > 0 ? 2 * p * rec / (p + rec) : 0.0);
  }
  return r;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

}  // namespace

TEST_CASE("metrics match the brute-force definitions on random instances") {
  std::mt19937 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 5);
    std::vector<std::string> classes;
    for (int c = 0; c < k; ++c) classes.push_back("K" + std::to_string(c));
    const int n = 1 + static_cast<int>(rng() % 40);
    std::vector<std::string> truths, preds;
    for (int i = 0; i < n; ++i) {
      truths.push_back(classes[rng() % k]);
      preds.push_back(classes[rng() % k]);
    }

    metrics::MetricsReport rep = metrics::compute_metrics(truths, preds, classes);
    OracleResult ref = oracle(truths, preds, classes);

    CHECK(std::abs(rep.accuracy - ref.accuracy) < 1e-9);
    CHECK(std::abs(rep.macro_precision - mean_of(ref.precision)) < 1e-9);
    CHECK(std::abs(rep.macro_recall - mean_of(ref.recall)) < 1e-9);
    CHECK(std::abs(rep.macro_f1 - mean_of(ref.f1)) < 1e-9);
    for (int c = 0; c < k; ++c) {
      const auto& cm = rep.per_class.at(classes[c]);
      CHECK(std::abs(cm.precision - ref.precision[c]) < 1e-9);
      CHECK(std::abs(cm.recall - ref.recall[c]) < 1e-9);
      CHECK(std::abs(cm.f1 - ref.f1[c]) < 1e-9);
    }

    // confusion matrix row sums equal class supports
    for (int c = 0; c < k; ++c) {
      int row = 0;
      for (int j = 0; j < k; ++j) row += rep.confusion[c][j];
      CHECK(row == rep.per_class.at(classes[c]).support);
    }
    CHECK(rep.n_samples == n);
  }
}

TEST_CASE("metrics are invariant under sample reordering") {
  std::vector<std::string> classes = {"A", "B", "C"};
  std::vector<std::string> truths = {"A", "B", "C", "A", "B", "C", "A"};
  std::vector<std::string> preds = {"A", "C", "C", "B", "B", "A", "A"};
  metrics::MetricsReport base = metrics::compute_metrics(truths, preds, classes);

  std::vector<std::size_t> idx(truths.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937 rng(5);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::string> t2, p2;
  for (auto i : idx) {
    t2.push_back(truths[i]);
    p2.push_back(preds[i]);
  }
  metrics::MetricsReport shuffled = metrics::compute_metrics(t2, p2, classes);
  CHECK(shuffled.accuracy == base.accuracy);
  CHECK(shuffled.macro_f1 == base.macro_f1);
  CHECK(shuffled.confusion == base.confusion);
}

TEST_CASE("bad metric inputs are rejected") {
  std::vector<std::string> classes = {"A", "B"};
  CHECK_THROWS_AS(metrics::compute_metrics({"A"}, {"A", "B"}, classes), Error);
  CHECK_THROWS_AS(metrics::compute_metrics({"Z"}, {"A"}, classes), Error);
  CHECK_THROWS_AS(metrics::compute_metrics({"A"}, {"Z"}, classes), Error);
}

TEST_CASE("zero-support classes contribute zeros to the macro averages") {
  std::vector<std::string> classes = {"A", "B", "C"};
  // class C never appears and is never predicted
  metrics::MetricsReport rep =
      metrics::compute_metrics({"A", "B", "A"}, {"A", "B", "B"}, classes);
  CHECK(rep.per_class.at("C").support == 0);
  CHECK(rep.per_class.at("C").f1 == 0.0);
  // macro average over all 3 classes, including the empty one
  const double expect =
      (rep.per_class.at("A").f1 + rep.per_class.at("B").f1 + 0.0) / 3.0;
  CHECK(rep.macro_f1 == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("run aggregation reports mean and sample standard deviation") {
  metrics::RunAggregate agg = metrics::aggregate_runs(std::vector<double>{0.8, 0.9});
  CHECK(agg.n_runs == 2);
  CHECK(agg.mean == doctest::Approx(0.85).epsilon(1e-12));
  // sample (n-1) standard deviation of {0.8, 0.9}
  CHECK(agg.stddev == doctest::Approx(std::sqrt(0.005)).epsilon(1e-9));

  metrics::RunAggregate one = metrics::aggregate_runs(std::vector<double>{0.7});
  CHECK(one.mean == doctest::Approx(0.7));
  CHECK(one.stddev == 0.0);
}

TEST_CASE("report aggregation requires matching class sets") {
  std::vector<std::string> classes = {"A", "B"};
  metrics::MetricsReport a = metrics::compute_metrics({"A", "B"}, {"A", "B"}, classes);
  metrics::MetricsReport b = metrics::compute_metrics({"A", "B"}, {"A", "A"}, classes);
  metrics::AggregateReport agg = metrics::aggregate_runs({a, b});
  CHECK(agg.accuracy.n_runs == 2);
  CHECK(agg.accuracy.mean == doctest::Approx((1.0 + 0.5) / 2));

  CHECK_THROWS_AS(metrics::aggregate_runs(std::vector<metrics::MetricsReport>{}), Error);
  metrics::MetricsReport c = metrics::compute_metrics({"X"}, {"X"}, {"X"});
  CHECK_THROWS_AS(metrics::aggregate_runs({a, c}), Error);
}

TEST_CASE("report json and disk round-trips preserve the numbers") {
  TempDir tmp("metrics");
  std::vector<std::string> classes = {"A", "B", "C"};
  metrics::MetricsReport rep =
      metrics::compute_metrics({"A", "B", "C", "A"}, {"A", "C", "C", "B"}, classes);
  metrics::MetricsReport back = metrics::MetricsReport::from_json(rep.to_json());
  CHECK(back.accuracy == rep.accuracy);
  CHECK(back.macro_f1 == rep.macro_f1);
  CHECK(back.confusion == rep.confusion);
  CHECK(back.class_names == rep.class_names);

  metrics::save_report(rep, tmp.path() / "rep.json");
  metrics::MetricsReport disk = metrics::load_report(tmp.path() / "rep.json");
  CHECK(disk.accuracy == rep.accuracy);
  CHECK(disk.per_class.at("B").support == rep.per_class.at("B").support);
}

TEST_CASE("tables render in every supported format") {
  std::vector<std::string> classes = {"A", "B"};
  metrics::MetricsReport rep =
      metrics::compute_metrics({"A", "B", "A"}, {"A", "B", "B"}, classes);

  const std::string text = metrics::emit_table(rep, "text");
  CHECK(text.find("accuracy") != std::string::npos);
  const std::string csv = metrics::emit_table(rep, "csv");
  CHECK(csv.find("__overall__") != std::string::npos);
  const std::string latex = metrics::emit_table(rep, "latex");
  CHECK(latex.find("\\begin{tabular}") != std::string::npos);
  CHECK_THROWS_AS(metrics::emit_table(rep, "html"), Error);

  metrics::AggregateReport agg = metrics::aggregate_runs({rep, rep});
  const std::string cmp = metrics::emit_comparison({{"SUR", agg}, {"MIX", agg}}, "text");
  CHECK(cmp.find("SUR") != std::string::npos);
  CHECK(cmp.find("MIX") != std::string::npos);
}
