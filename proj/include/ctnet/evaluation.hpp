#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctnet/dataset.hpp"

namespace ctnet::eval {

struct ClassCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

// One-vs-rest counts per class.
struct ConfusionCounts {
  std::vector<ClassCounts> classes;
  std::size_t total = 0;
};

ConfusionCounts confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                          std::size_t classes);

// Table column order.
enum class Metric { f1, accuracy, sensitivity, specificity, precision };
inline constexpr std::size_t kMetricCount = 5;
inline constexpr std::array<Metric, kMetricCount> kMetrics{Metric::f1, Metric::accuracy, Metric::sensitivity,
                                                           Metric::specificity, Metric::precision};
const char* metric_name(Metric m);  // "F1", "Accuracy", ...

struct MetricValue {
  double value = 0.0;    // 0 when undefined
  bool defined = true;   // false on a zero denominator
};

struct ClassMetrics {
  std::array<MetricValue, kMetricCount> values;
  const MetricValue& operator[](Metric m) const { return values[static_cast<std::size_t>(m)]; }
  MetricValue& operator[](Metric m) { return values[static_cast<std::size_t>(m)]; }
};

using MetricsReport = std::vector<ClassMetrics>;

// accuracy = (TP+TN)/total, precision = TP/(TP+FP), specificity = TN/(TN+FP),
// sensitivity = TP/(TP+FN), F1 = 2PR/(P+R).
ClassMetrics class_metrics(const ClassCounts& c);
MetricsReport metrics(const ConfusionCounts& counts);

struct AggregateEntry {
  double mean = 0.0;
  double sd = 0.0;          // sample standard deviation
  double half_width = 0.0;  // 1.96 sd / sqrt(n); 0 when n = 1
  std::size_t n = 0;
  bool single_round = false;  // n = 1: the interval is not meaningful
};

struct AggregateReport {
  std::vector<std::array<AggregateEntry, kMetricCount>> classes;
  std::size_t rounds = 0;

  const AggregateEntry& at(std::size_t cls, Metric m) const { return classes.at(cls)[static_cast<std::size_t>(m)]; }
};

// Mean +/- 1.96 s / sqrt(n) per metric and class over rounds.
AggregateReport aggregate(const std::vector<MetricsReport>& rounds);

// Trains on train_indices and returns predicted labels for test_indices.
using TrainProcedure =
    std::function<std::vector<std::size_t>(const data::DatasetManifest& manifest,
                                           const std::vector<std::size_t>& train_indices,
                                           const std::vector<std::size_t>& test_indices, std::uint64_t seed)>;

struct CrossValidationOptions {
  std::size_t k = 5;
  std::size_t rounds = 3;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct CrossValidationResult {
  AggregateReport report;
  std::vector<MetricsReport> round_metrics;
};

// Each round draws a fresh patient-wise split, trains every fold, pools the
// folds' test predictions and scores them once. Folds may run on several
// threads; seeds depend only on (seed, round, fold), so results do not
// depend on the thread count.
CrossValidationResult cross_validate(const TrainProcedure& procedure, const data::DatasetManifest& manifest,
                                     const CrossValidationOptions& options);

std::uint64_t round_seed(std::uint64_t seed, std::size_t round);
std::uint64_t fold_seed(std::uint64_t seed, std::size_t round, std::size_t fold);

// ---------------------------------------------------------------------------

struct TimingReport {
  std::size_t images = 0;
  double total_seconds = 0.0;
  double seconds_per_image = 0.0;
  std::string hardware;

  static std::string csv_header();  // "images,total_seconds,seconds_per_image,hardware"
  std::string csv_line() const;
};

// Runs n single-image forward passes of fn and times them.
TimingReport time_runs(std::size_t n, const std::function<void(std::size_t)>& fn);
std::string hardware_description();

// ---------------------------------------------------------------------------

struct ModelReport {
  std::string model;
  AggregateReport report;
};

// Fixed-width table for one class: one row per model, columns
// F1 Accuracy Sensitivity Specificity Precision as "mean ± half-width".
std::string render_table(const std::vector<ModelReport>& reports, std::size_t cls,
                         const std::vector<std::string>& class_names = {});
// model,class,metric,mean,halfwidth,n for every model, class and metric.
std::string render_csv(const std::vector<ModelReport>& reports, const std::vector<std::string>& class_names = {});

struct CsvRow {
  std::string model, cls, metric;
  double mean = 0.0, half_width = 0.0;
  std::size_t n = 0;
};
std::vector<CsvRow> parse_report_csv(const std::string& text);

}  // namespace ctnet::eval
