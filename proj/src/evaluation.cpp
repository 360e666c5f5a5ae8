#include "ctnet/evaluation.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "ctnet/config.hpp"
#include "ctnet/error.hpp"
#include "ctnet/rng.hpp"

namespace ctnet::eval {

ConfusionCounts confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                          std::size_t classes) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(truth.size()) + " labels");
  }
  ConfusionCounts c;
  c.classes.assign(classes, ClassCounts{});
  c.total = truth.size();
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] >= classes || truth[i] >= classes) {
      throw DimensionError("confusion: label " + std::to_string(std::max(predicted[i], truth[i])) +
                           " out of range for " + std::to_string(classes) + " classes");
    }
  }
  for (std::size_t k = 0; k < classes; ++k) {
    auto& cc = c.classes[k];
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool p = predicted[i] == k, t = truth[i] == k;
      if (p && t) ++cc.tp;
      else if (p) ++cc.fp;
      else if (t) ++cc.fn;
      else ++cc.tn;
    }
  }
  return c;
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::f1: return "F1";
    case Metric::accuracy: return "Accuracy";
    case Metric::sensitivity: return "Sensitivity";
    case Metric::specificity: return "Specificity";
    case Metric::precision: return "Precision";
  }
  return "?";
}

namespace {

MetricValue ratio(std::size_t num, std::size_t den) {
  if (den == 0) return {0.0, false};
  return {static_cast<double>(num) / static_cast<double>(den), true};
}

}  // namespace

ClassMetrics class_metrics(const ClassCounts& c) {
  ClassMetrics m;
  m[Metric::accuracy] = ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn);
  m[Metric::precision] = ratio(c.tp, c.tp + c.fp);
  m[Metric::specificity] = ratio(c.tn, c.tn + c.fp);
  m[Metric::sensitivity] = ratio(c.tp, c.tp + c.fn);
  const auto& p = m[Metric::precision];
  const auto& r = m[Metric::sensitivity];
  if (p.defined && r.defined && p.value + r.value > 0) {
    m[Metric::f1] = {2 * p.value * r.value / (p.value + r.value), true};
  } else {
    m[Metric::f1] = {0.0, false};
  }
  return m;
}

MetricsReport metrics(const ConfusionCounts& counts) {
  MetricsReport r;
  for (const auto& c : counts.classes) r.push_back(class_metrics(c));
  return r;
}

AggregateReport aggregate(const std::vector<MetricsReport>& rounds) {
  if (rounds.empty()) throw ConfigError("aggregate needs at least one round");
  const std::size_t classes = rounds.front().size();
  for (const auto& r : rounds) {
    if (r.size() != classes) throw DimensionError("aggregate: rounds disagree on the class count");
  }
  const std::size_t n = rounds.size();
  AggregateReport out;
  out.rounds = n;
  out.classes.resize(classes);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t m = 0; m < kMetricCount; ++m) {
      double sum = 0;
      bool constant = true;
      for (const auto& r : rounds) {
        sum += r[c].values[m].value;
        constant = constant && r[c].values[m].value == rounds.front()[c].values[m].value;
      }
      // Equal rounds get their value back exactly, so the interval is exactly 0.
      const double mean = constant ? rounds.front()[c].values[m].value : sum / static_cast<double>(n);
      double ss = 0;
      for (const auto& r : rounds) ss += (r[c].values[m].value - mean) * (r[c].values[m].value - mean);
      AggregateEntry& e = out.classes[c][m];
      e.mean = mean;
      e.n = n;
      e.single_round = n == 1;
      e.sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
      e.half_width = n > 1 ? 1.96 * e.sd / std::sqrt(static_cast<double>(n)) : 0.0;
    }
  return out;
}

std::uint64_t round_seed(std::uint64_t seed, std::size_t round) { return Rng::derive(seed, {0x5eed, round}); }

std::uint64_t fold_seed(std::uint64_t seed, std::size_t round, std::size_t fold) {
  return Rng::derive(seed, {0xf01d, round, fold});
}

CrossValidationResult cross_validate(const TrainProcedure& procedure, const data::DatasetManifest& manifest,
                                     const CrossValidationOptions& options) {
  if (options.rounds < 1) throw ConfigError("cross-validation needs at least one round");
  const std::size_t n = manifest.records.size();
  std::vector<data::SplitPlan> plans;
  for (std::size_t r = 0; r < options.rounds; ++r)
    plans.push_back(data::patient_kfold_split(manifest, options.k, round_seed(options.seed, r)));

  struct Job {
    std::size_t round, fold;
    std::vector<std::size_t> predictions;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < options.rounds; ++r)
    for (std::size_t f = 0; f < options.k; ++f) jobs.push_back(Job{r, f, {}, nullptr});

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      Job& job = jobs[j];
      const auto& fold = plans[job.round].folds[job.fold];
      try {
        job.predictions = procedure(manifest, fold.train_indices, fold.test_indices,
                                    fold_seed(options.seed, job.round, job.fold));
        if (job.predictions.size() != fold.test_indices.size()) {
          throw DimensionError("train procedure returned " + std::to_string(job.predictions.size()) +
                               " predictions for " + std::to_string(fold.test_indices.size()) + " test images");
        }
      } catch (...) {
        job.error = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, jobs.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<std::size_t> truth(n);
  for (std::size_t i = 0; i < n; ++i) truth[i] = manifest.records[i].label;
  CrossValidationResult result;
  for (std::size_t r = 0; r < options.rounds; ++r) {
    std::vector<std::size_t> pooled(n, 0);
    for (std::size_t f = 0; f < options.k; ++f) {
      const Job& job = jobs[r * options.k + f];
      if (job.error) {
        try {
          std::rethrow_exception(job.error);
        } catch (const std::exception& e) {
          throw std::runtime_error("round " + std::to_string(r) + ", fold " + std::to_string(f) + ": " + e.what());
        }
      }
      const auto& test = plans[r].folds[f].test_indices;
      for (std::size_t i = 0; i < test.size(); ++i) pooled[test[i]] = job.predictions[i];
    }
    result.round_metrics.push_back(metrics(confusion(pooled, truth, manifest.num_classes())));
  }
  result.report = aggregate(result.round_metrics);
  return result;
}

// ---------------------------------------------------------------------------

std::string TimingReport::csv_header() { return "images,total_seconds,seconds_per_image,hardware"; }

std::string TimingReport::csv_line() const {
  return std::to_string(images) + "," + format_real(total_seconds) + "," + format_real(seconds_per_image) + "," +
         hardware;
}

TimingReport time_runs(std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (n < 1) throw ConfigError("timing needs at least one image");
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < n; ++i) fn(i);
  const auto t1 = std::chrono::steady_clock::now();
  TimingReport r;
  r.images = n;
  r.total_seconds = std::chrono::duration<double>(t1 - t0).count();
  r.seconds_per_image = r.total_seconds / static_cast<double>(n);
  r.hardware = hardware_description();
  return r;
}

std::string hardware_description() {
  std::string model = "unknown CPU";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(colon + 1);
      break;
    }
  }
  const auto first = model.find_first_not_of(' ');
  model = first == std::string::npos ? "unknown CPU" : model.substr(first);
  for (auto& ch : model)
    if (ch == ',') ch = ';';
  return model + "; 1 thread";
}

// ---------------------------------------------------------------------------

namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Display width of UTF-8 text.
std::size_t columns(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
  return n;
}

std::string pad(const std::string& s, std::size_t width) {
  const std::size_t w = columns(s);
  return s + std::string(width > w ? width - w : 0, ' ');
}

std::string class_label(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? names[c] : std::to_string(c);
}

}  // namespace

std::string render_table(const std::vector<ModelReport>& reports, std::size_t cls,
                         const std::vector<std::string>& class_names) {
  if (reports.empty()) throw ConfigError("render_table needs at least one report");
  std::size_t model_width = 5;
  for (const auto& r : reports) model_width = std::max(model_width, columns(r.model));
  model_width += 2;
  constexpr std::size_t cell = 17;

  std::ostringstream os;
  os << "Class: " << class_label(class_names, cls) << '\n';
  std::string header = pad("Model", model_width);
  for (auto m : kMetrics) header += pad(metric_name(m), cell);
  while (!header.empty() && header.back() == ' ') header.pop_back();
  os << header << '\n';
  for (const auto& r : reports) {
    std::string row = pad(r.model, model_width);
    for (auto m : kMetrics) {
      const auto& e = r.report.at(cls, m);
      row += pad(fixed4(e.mean) + " ± " + fixed4(e.half_width), cell);
    }
    while (!row.empty() && row.back() == ' ') row.pop_back();
    os << row << '\n';
  }
  return os.str();
}

std::string render_csv(const std::vector<ModelReport>& reports, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << "model,class,metric,mean,halfwidth,n\n";
  for (const auto& r : reports)
    for (std::size_t c = 0; c < r.report.classes.size(); ++c)
      for (auto m : kMetrics) {
        const auto& e = r.report.at(c, m);
        os << r.model << ',' << class_label(class_names, c) << ',' << metric_name(m) << ',' << fixed4(e.mean) << ','
           << fixed4(e.half_width) << ',' << e.n << '\n';
      }
  return os.str();
}

std::vector<CsvRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<CsvRow> rows;
  if (!std::getline(in, line) || line != "model,class,metric,mean,halfwidth,n") {
    throw ConfigError("report CSV: unexpected header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
    if (f.size() != 6) throw ConfigError("report CSV: expected 6 fields in '" + line + "'");
    rows.push_back(CsvRow{f[0], f[1], f[2], parse_real(f[3], "mean"), parse_real(f[4], "halfwidth"),
                          parse_count(f[5], "n")});
  }
  return rows;
}

}  // namespace ctnet::eval
