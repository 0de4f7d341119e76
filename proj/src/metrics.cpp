#include "stonefuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "stonefuse/common.hpp"

namespace stonefuse::metrics {

using nlohmann::json;

MetricsReport compute_metrics(const std::vector<std::string>& truths,
                              const std::vector<std::string>& predictions,
                              const std::vector<std::string>& class_names) {
  if (truths.size() != predictions.size()) {
    fail("length_mismatch", "got " + std::to_string(truths.size()) + " truths but " +
                                std::to_string(predictions.size()) + " predictions");
  }
  if (class_names.empty()) fail("bad_config", "empty class list");
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    index[class_names[i]] = static_cast<int>(i);
  }
  const int K = static_cast<int>(class_names.size());
  MetricsReport r;
  r.class_names = class_names;
  r.confusion.assign(K, std::vector<int>(K, 0));
  r.n_samples = static_cast<int>(truths.size());
  auto lookup = [&](const std::string& label) {
    auto it = index.find(label);
    if (it == index.end()) fail("unknown_label", "label not in class list: " + label);
    return it->second;
  };
  int correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int t = lookup(truths[i]);
    const int p = lookup(predictions[i]);
    ++r.confusion[t][p];
    if (t == p) ++correct;
  }
  r.accuracy = r.n_samples ? static_cast<double>(correct) / r.n_samples : 0.0;
  for (int k = 0; k < K; ++k) {
    int tp = r.confusion[k][k], fp = 0, fn = 0;
    for (int j = 0; j < K; ++j) {
      if (j == k) continue;
      fp += r.confusion[j][k];
      fn += r.confusion[k][j];
    }
    ClassMetrics cm;
    cm.support = tp + fn;
    if (cm.support == 0) {
      std::fprintf(stderr, "warning: class %s has no samples\n", class_names[k].c_str());
    }
    cm.precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
    cm.recall = cm.support ? static_cast<double>(tp) / cm.support : 0.0;
    cm.f1 = (cm.precision + cm.recall) > 0
                ? 2 * cm.precision * cm.recall / (cm.precision + cm.recall)
                : 0.0;
    r.per_class[class_names[k]] = cm;
    r.macro_precision += cm.precision / K;
    r.macro_recall += cm.recall / K;
    r.macro_f1 += cm.f1 / K;
  }
  return r;
}

RunAggregate aggregate_runs(const std::vector<double>& values) {
  RunAggregate a;
  a.n_runs = static_cast<int>(values.size());
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= values.size();
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / (values.size() - 1));
  }
  return a;
}

AggregateReport aggregate_runs(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) fail("empty_input", "no reports to aggregate");
  for (const auto& r : reports) {
    if (r.class_names != reports.front().class_names) {
      fail("class_mismatch", "reports disagree on the class set");
    }
  }
  std::vector<double> acc, mp, mr, mf;
  for (const auto& r : reports) {
    acc.push_back(r.accuracy);
    mp.push_back(r.macro_precision);
    mr.push_back(r.macro_recall);
    mf.push_back(r.macro_f1);
  }
  AggregateReport a;
  a.accuracy = aggregate_runs(acc);
  a.macro_precision = aggregate_runs(mp);
  a.macro_recall = aggregate_runs(mr);
  a.macro_f1 = aggregate_runs(mf);
  return a;
}

namespace {

std::string pm(const RunAggregate& a) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3f+-%.3f", a.mean, a.stddev);
  return buf;
}

}  // namespace

std::string emit_comparison(
    const std::vector<std::pair<std::string, AggregateReport>>& rows,
    const std::string& format) {
  if (rows.empty()) fail("empty_input", "no rows to tabulate");
  std::ostringstream os;
  if (format == "text") {
    os << "view/config       accuracy        precision       recall          f1\n";
    for (const auto& [name, a] : rows) {
      char buf[200];
      std::snprintf(buf, sizeof(buf), "%-17s %-15s %-15s %-15s %s\n", name.c_str(),
                    pm(a.accuracy).c_str(), pm(a.macro_precision).c_str(),
                    pm(a.macro_recall).c_str(), pm(a.macro_f1).c_str());
      os << buf;
    }
  } else if (format == "csv") {
    os << "name,accuracy_mean,accuracy_std,precision_mean,precision_std,"
          "recall_mean,recall_std,f1_mean,f1_std,n_runs\n";
    for (const auto& [name, a] : rows) {
      os << name << "," << a.accuracy.mean << "," << a.accuracy.stddev << ","
         << a.macro_precision.mean << "," << a.macro_precision.stddev << ","
         << a.macro_recall.mean << "," << a.macro_recall.stddev << "," << a.macro_f1.mean
         << "," << a.macro_f1.stddev << "," << a.accuracy.n_runs << "\n";
    }
  } else if (format == "latex") {
    os << "\\begin{tabular}{lcccc}\n\\hline\nView & Accuracy & Precision & Recall & "
          "F1-Score \\\\\n\\hline\n";
    for (const auto& [name, a] : rows) {
      char buf[256];
      std::snprintf(buf, sizeof(buf),
                    "%s & $%.3f\\pm%.3f$ & $%.3f\\pm%.3f$ & $%.3f\\pm%.3f$ & "
                    "$%.3f\\pm%.3f$ \\\\\n",
                    name.c_str(), a.accuracy.mean, a.accuracy.stddev,
                    a.macro_precision.mean, a.macro_precision.stddev,
                    a.macro_recall.mean, a.macro_recall.stddev, a.macro_f1.mean,
                    a.macro_f1.stddev);
      os << buf;
    }
    os << "\\hline\n\\end{tabular}\n";
  } else {
    fail("bad_format", "unknown table format: " + format);
  }
  return os.str();
}

json MetricsReport::to_json() const {
  json j;
  j["accuracy"] = accuracy;
  j["macro_precision"] = macro_precision;
  j["macro_recall"] = macro_recall;
  j["macro_f1"] = macro_f1;
  j["n_samples"] = n_samples;
  j["class_names"] = class_names;
  j["confusion"] = confusion;
  json pc = json::object();
  for (const auto& [name, cm] : per_class) {
    pc[name] = {{"precision", cm.precision},
                {"recall", cm.recall},
                {"f1", cm.f1},
                {"support", cm.support}};
  }
  j["per_class"] = pc;
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_precision = j.at("macro_precision").get<double>();
  r.macro_recall = j.at("macro_recall").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.n_samples = j.at("n_samples").get<int>();
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  r.confusion = j.at("confusion").get<std::vector<std::vector<int>>>();
  for (const auto& [name, cm] : j.at("per_class").items()) {
    r.per_class[name] = {cm.at("precision").get<double>(), cm.at("recall").get<double>(),
                         cm.at("f1").get<double>(), cm.at("support").get<int>()};
  }
  return r;
}

std::string emit_table(const MetricsReport& r, const std::string& format) {
  std::ostringstream os;
  char buf[160];
  if (format == "text") {
    os << "class        precision  recall     f1         support\n";
    for (const auto& name : r.class_names) {
      const auto& c = r.per_class.at(name);
      std::snprintf(buf, sizeof(buf), "%-12s %-10.4f %-10.4f %-10.4f %d\n", name.c_str(),
                    c.precision, c.recall, c.f1, c.support);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "\naccuracy %.4f  macro-p %.4f  macro-r %.4f  macro-f1 %.4f  (n=%d)\n",
                  r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1, r.n_samples);
    os << buf;
  } else if (format == "csv") {
    os << "class,precision,recall,f1,support\n";
    for (const auto& name : r.class_names) {
      const auto& c = r.per_class.at(name);
      os << name << "," << c.precision << "," << c.recall << "," << c.f1 << ","
         << c.support << "\n";
    }
    os << "__overall__," << r.macro_precision << "," << r.macro_recall << ","
       << r.macro_f1 << "," << r.n_samples << "\n";
  } else if (format == "latex") {
    os << "\\begin{tabular}{lrrrr}\n\\hline\nclass & precision & recall & F1 & support "
          "\\\\\n\\hline\n";
    for (const auto& name : r.class_names) {
      const auto& c = r.per_class.at(name);
      std::snprintf(buf, sizeof(buf), "%s & %.4f & %.4f & %.4f & %d \\\\\n", name.c_str(),
                    c.precision, c.recall, c.f1, c.support);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "\\hline\nmacro & %.4f & %.4f & %.4f & %d \\\\\n\\hline\n"
                  "\\end{tabular}\n",
                  r.macro_precision, r.macro_recall, r.macro_f1, r.n_samples);
    os << buf;
  } else {
    fail("bad_format", "unknown table format: " + format);
  }
  return os.str();
}

void save_report(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail("store_write", "cannot write " + path.string());
  out << report.to_json().dump(2) << "\n";
}

MetricsReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("missing_file", "cannot open " + path.string());
  json j;
  in >> j;
  return MetricsReport::from_json(j);
}

}  // namespace stonefuse::metrics
