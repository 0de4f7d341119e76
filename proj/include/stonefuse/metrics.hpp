#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace stonefuse::metrics {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int support = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::map<std::string, ClassMetrics> per_class;
  // confusion[i][j]: true class i predicted as class j, class order as given
  std::vector<std::string> class_names;
  std::vector<std::vector<int>> confusion;
  int n_samples = 0;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

// Accuracy, macro precision/recall/F1 and the confusion matrix over string
// labels. Classes with zero support contribute zeros to the macro averages
// (with a warning). Unknown labels and length mismatches are errors.
MetricsReport compute_metrics(const std::vector<std::string>& truths,
                              const std::vector<std::string>& predictions,
                              const std::vector<std::string>& class_names);

struct RunAggregate {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n-1)
  int n_runs = 0;
};

RunAggregate aggregate_runs(const std::vector<double>& values);

// Mean+-std per headline metric over several runs of one configuration.
struct AggregateReport {
  RunAggregate accuracy, macro_precision, macro_recall, macro_f1;
  std::vector<std::string> run_ids;
};

// Errors on an empty list or mixed class sets.
AggregateReport aggregate_runs(const std::vector<MetricsReport>& reports);

// Comparison table with View/Accuracy/Precision/Recall/F1 columns, one row
// per named configuration; format is "text", "csv" or "latex".
std::string emit_comparison(
    const std::vector<std::pair<std::string, AggregateReport>>& rows,
    const std::string& format);

// Renders a metrics table; format is "text", "csv" or "latex".
std::string emit_table(const MetricsReport& report, const std::string& format);

void save_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport load_report(const std::filesystem::path& path);

}  // namespace stonefuse::metrics
