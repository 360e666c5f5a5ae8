#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <thread>

#include "ctnet/error.hpp"
#include "ctnet/evaluation.hpp"
#include "ctnet/rng.hpp"

using namespace ctnet;
using namespace ctnet::eval;

namespace {

// Straight from the label pairs, one class at a time.
std::array<double, 5> brute_force(const std::vector<std::size_t>& p, const std::vector<std::size_t>& t, std::size_t c,
                                  std::array<bool, 5>& defined) {
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pc = p[i] == c, tc = t[i] == c;
    if (pc && tc) tp += 1;
    if (!pc && !tc) tn += 1;
    if (pc && !tc) fp += 1;
    if (!pc && tc) fn += 1;
  }
  const double acc = (tp + tn) / (tp + tn + fp + fn);
  const double prec = tp + fp > 0 ? tp / (tp + fp) : 0;
  const double spec = tn + fp > 0 ? tn / (tn + fp) : 0;
  const double sens = tp + fn > 0 ? tp / (tp + fn) : 0;
  const bool f1_ok = tp + fp > 0 && tp + fn > 0 && prec + sens > 0;
  const double f1 = f1_ok ? 2 * prec * sens / (prec + sens) : 0;
  defined = {f1_ok, true, tp + fn > 0, tn + fp > 0, tp + fp > 0};
  return {f1, acc, sens, spec, prec};
}

MetricsReport constant_report(std::size_t classes, double v) {
  MetricsReport r(classes);
  for (auto& c : r)
    for (auto& m : c.values) m = {v, true};
  return r;
}

data::DatasetManifest small_manifest(std::size_t patients, std::size_t classes) {
  data::DatasetManifest m;
  for (std::size_t c = 0; c < classes; ++c) m.class_names.push_back("c" + std::to_string(c));
  for (std::size_t p = 0; p < patients; ++p)
    for (std::size_t i = 0; i < 2; ++i)
      m.records.push_back({"p" + std::to_string(p) + "_" + std::to_string(i), "p" + std::to_string(p), p % classes});
  return m;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("confusion counts") {
  const std::vector<std::size_t> t{0, 1, 2, 0}, p{0, 2, 2, 1};
  const auto cc = confusion(p, t, 3);
  CHECK(cc.total == 4);
  CHECK(cc.classes[0] == ClassCounts{1, 2, 0, 1});
  CHECK(cc.classes[1] == ClassCounts{0, 2, 1, 1});
  CHECK(cc.classes[2] == ClassCounts{1, 2, 1, 0});

  const auto perfect = confusion(t, t, 3);
  for (const auto& c : perfect.classes) CHECK((c.fp == 0 && c.fn == 0));
  const auto empty = confusion({}, {}, 2);
  for (const auto& c : empty.classes) CHECK(c == ClassCounts{});
  CHECK_THROWS_AS(confusion(p, std::vector<std::size_t>{0}, 3), DimensionError);
  CHECK_THROWS(confusion(std::vector<std::size_t>{3}, std::vector<std::size_t>{0}, 3));
}

TEST_CASE("metric formulas") {
  const auto m = class_metrics({90, 80, 20, 10});
  CHECK(m[Metric::accuracy].value == doctest::Approx(0.85).epsilon(1e-12));
  CHECK(m[Metric::precision].value == doctest::Approx(0.8181818).epsilon(1e-7));
  CHECK(m[Metric::specificity].value == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(m[Metric::sensitivity].value == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(m[Metric::f1].value == doctest::Approx(0.8571429).epsilon(1e-7));

  const auto perfect = class_metrics({5, 7, 0, 0});
  for (const auto& v : perfect.values) CHECK((v.defined && v.value == 1.0));

  const auto none = class_metrics({0, 7, 0, 3});
  CHECK_FALSE(none[Metric::precision].defined);
  CHECK_FALSE(none[Metric::f1].defined);
  CHECK(none[Metric::precision].value == 0.0);
  CHECK(none[Metric::sensitivity].defined);
}

TEST_CASE("metrics match a brute-force evaluation on 10^4 random label sets") {
  Rng rng(2024);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = std::array<std::size_t, 3>{2, 3, 5}[rng.below(3)];
    const std::size_t n = 1 + rng.below(60);
    std::vector<std::size_t> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = rng.below(k), t[i] = rng.below(k);
    const auto report = metrics(confusion(p, t, k));
    REQUIRE(report.size() == k);
    for (std::size_t c = 0; c < k; ++c) {
      std::array<bool, 5> defined{};
      const auto expect = brute_force(p, t, c, defined);
      for (std::size_t j = 0; j < 5; ++j) {
        REQUIRE(std::abs(report[c].values[j].value - expect[j]) <= 1e-12);
        REQUIRE(report[c].values[j].defined == defined[j]);
      }
    }
  }
}

TEST_CASE("count invariants, F1 bounds and order invariance") {
  Rng rng(6);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t k = 2 + rng.below(4), n = 1 + rng.below(40);
    std::vector<std::size_t> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = rng.below(k), t[i] = rng.below(k);
    const auto cc = confusion(p, t, k);
    for (std::size_t c = 0; c < k; ++c) {
      const auto support = static_cast<std::size_t>(std::count(t.begin(), t.end(), c));
      REQUIRE(cc.classes[c].tp + cc.classes[c].fn == support);
      REQUIRE(cc.classes[c].tn + cc.classes[c].fp == n - support);
      const auto m = class_metrics(cc.classes[c]);
      if (m[Metric::precision].defined && m[Metric::sensitivity].defined && m[Metric::f1].defined) {
        const double lo = std::min(m[Metric::precision].value, m[Metric::sensitivity].value);
        const double hi = std::max(m[Metric::precision].value, m[Metric::sensitivity].value);
        REQUIRE(m[Metric::f1].value >= lo - 1e-15);
        REQUIRE(m[Metric::f1].value <= hi + 1e-15);
      }
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    data::shuffle(order, rng);
    std::vector<std::size_t> p2(n), t2(n);
    for (std::size_t i = 0; i < n; ++i) p2[i] = p[order[i]], t2[i] = t[order[i]];
    const auto a = metrics(cc), b = metrics(confusion(p2, t2, k));
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < 5; ++j) REQUIRE(a[c].values[j].value == b[c].values[j].value);
  }
}

TEST_CASE("aggregation") {
  const auto two = aggregate({constant_report(2, 0.9), constant_report(2, 1.0)});
  CHECK(two.rounds == 2);
  const auto& e = two.at(1, Metric::f1);
  CHECK(e.mean == doctest::Approx(0.95).epsilon(1e-12));
  CHECK(std::abs(e.sd - 0.0707107) < 1e-6);
  CHECK(std::abs(e.half_width - 0.098) < 1e-6);
  CHECK(std::abs(e.half_width - 1.96 * 0.0707107 / std::sqrt(2.0)) < 1e-6);
  CHECK_FALSE(e.single_round);

  const auto same = aggregate({constant_report(3, 0.7), constant_report(3, 0.7), constant_report(3, 0.7)});
  for (std::size_t c = 0; c < 3; ++c)
    for (auto m : kMetrics) CHECK(same.at(c, m).half_width == 0.0);

  const auto one = aggregate({constant_report(2, 0.4)});
  CHECK(one.at(0, Metric::accuracy).half_width == 0.0);
  CHECK(one.at(0, Metric::accuracy).single_round);
  CHECK(one.at(0, Metric::accuracy).n == 1);
  CHECK_THROWS(aggregate({}));

  // Half-width is zero exactly when all round values agree.
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<MetricsReport> rounds;
    const bool equal = rng.below(2) == 0;
    for (int r = 0; r < 4; ++r) rounds.push_back(constant_report(1, equal ? 0.5 : rng.uniform()));
    REQUIRE((aggregate(rounds).at(0, Metric::precision).half_width == 0.0) == equal);
  }
}

TEST_CASE("cross-validation with a deterministic stub trainer") {
  const auto m = small_manifest(20, 2);
  // Predicts the true label except for images of every third patient.
  const TrainProcedure stub = [](const data::DatasetManifest& man, const std::vector<std::size_t>&,
                                 const std::vector<std::size_t>& test, std::uint64_t) {
    std::vector<std::size_t> out;
    for (auto i : test) {
      const auto& r = man.records[i];
      const bool flip = std::stoul(r.patient_id.substr(1)) % 3 == 0;
      out.push_back(flip ? 1 - r.label : r.label);
    }
    return out;
  };
  CrossValidationOptions opt;
  opt.k = 5;
  opt.rounds = 3;
  opt.seed = 7;
  const auto res = cross_validate(stub, m, opt);
  CHECK(res.round_metrics.size() == 3);
  for (std::size_t c = 0; c < 2; ++c)
    for (auto metric : kMetrics) CHECK(res.report.at(c, metric).half_width == 0.0);

  opt.rounds = 1;
  CHECK(cross_validate(stub, m, opt).report.at(0, Metric::f1).single_round);

  // The training procedure sees disjoint patient sets and per-fold seeds.
  std::atomic<int> calls{0};
  const TrainProcedure checker = [&](const data::DatasetManifest& man, const std::vector<std::size_t>& train,
                                     const std::vector<std::size_t>& test, std::uint64_t) {
    ++calls;
    std::set<std::string> tr;
    for (auto i : train) tr.insert(man.records[i].patient_id);
    for (auto i : test) CHECK(tr.count(man.records[i].patient_id) == 0);
    return std::vector<std::size_t>(test.size(), 0);
  };
  opt.rounds = 2;
  cross_validate(checker, m, opt);
  CHECK(calls == 10);
  CHECK(fold_seed(7, 0, 1) != fold_seed(7, 1, 0));
  CHECK(round_seed(7, 0) != round_seed(7, 1));
}

TEST_CASE("cross-validation results do not depend on the thread count") {
  const auto m = small_manifest(30, 3);
  const TrainProcedure noisy = [](const data::DatasetManifest& man, const std::vector<std::size_t>&,
                                  const std::vector<std::size_t>& test, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> out;
    for (auto i : test) out.push_back(rng.below(4) == 0 ? rng.below(3) : man.records[i].label);
    std::this_thread::sleep_for(std::chrono::milliseconds(rng.below(3)));
    return out;
  };
  CrossValidationOptions opt;
  opt.rounds = 3;
  opt.seed = 3;
  opt.threads = 1;
  const auto a = render_csv({{"stub", cross_validate(noisy, m, opt).report}});
  opt.threads = 4;
  const auto b = render_csv({{"stub", cross_validate(noisy, m, opt).report}});
  CHECK(a == b);
}

TEST_CASE("a wrong prediction count is an error") {
  const auto m = small_manifest(10, 2);
  const TrainProcedure bad = [](const data::DatasetManifest&, const std::vector<std::size_t>&,
                                const std::vector<std::size_t>&, std::uint64_t) { return std::vector<std::size_t>{0}; };
  CHECK_THROWS_WITH(cross_validate(bad, m, {}), doctest::Contains("round 0, fold 0: train procedure returned 1"));
}

TEST_CASE("timing harness") {
  volatile double sink = 0;
  const auto work = [&](std::size_t) {
    for (int i = 0; i < 20000; ++i) sink = sink + std::sqrt(static_cast<double>(i));
  };
  const auto r = time_runs(50, work);
  CHECK(r.images == 50);
  CHECK(std::abs(r.seconds_per_image * 50 - r.total_seconds) <= 1e-6 * r.total_seconds);
  const auto one = time_runs(1, work);
  CHECK(one.total_seconds == one.seconds_per_image);
  CHECK_FALSE(r.hardware.empty());
  CHECK(TimingReport::csv_header() == "images,total_seconds,seconds_per_image,hardware");

  // Sanity band between consecutive runs; a loaded machine gets a few tries.
  bool close = false;
  for (int attempt = 0; attempt < 5 && !close; ++attempt) {
    const double a = time_runs(50, work).seconds_per_image, b = time_runs(50, work).seconds_per_image;
    close = std::abs(a - b) < 0.5 * std::max(a, b);
  }
  CHECK(close);
}

TEST_CASE("table rendering") {
  AggregateReport perfect = aggregate({constant_report(1, 1.0), constant_report(1, 1.0)});
  const auto table = render_table({{"toy-b0", perfect}}, 0, {"covid"});
  CHECK(table.find("Class: covid") == 0);
  const auto header_at = table.find('\n') + 1;
  const auto header = table.substr(header_at, table.find('\n', header_at) - header_at);
  const std::vector<std::string> order{"Model", "F1", "Accuracy", "Sensitivity", "Specificity", "Precision"};
  std::size_t pos = 0;
  for (const auto& name : order) {
    const auto at = header.find(name, pos);
    REQUIRE(at != std::string::npos);
    pos = at + name.size();
  }
  std::size_t count = 0;
  for (auto at = table.find("1.0000 ± 0.0000"); at != std::string::npos; at = table.find("1.0000 ± 0.0000", at + 1))
    ++count;
  CHECK(count == 5);
  CHECK_THROWS(render_table({}, 0));
}

TEST_CASE("csv twin round-trips within 5e-5") {
  Rng rng(12);
  std::vector<MetricsReport> rounds;
  for (int r = 0; r < 4; ++r) {
    MetricsReport rep(3);
    for (auto& c : rep)
      for (auto& v : c.values) v = {rng.uniform(), true};
    rounds.push_back(rep);
  }
  const std::vector<ModelReport> reports{{"a", aggregate(rounds)}, {"b", aggregate({rounds[0]})}};
  const auto rows = parse_report_csv(render_csv(reports, {"x", "y", "z"}));
  REQUIRE(rows.size() == 2 * 3 * 5);
  std::size_t i = 0;
  for (const auto& r : reports)
    for (std::size_t c = 0; c < 3; ++c)
      for (auto m : kMetrics) {
        const auto& row = rows[i++];
        CHECK(row.model == r.model);
        CHECK(row.metric == metric_name(m));
        CHECK(std::abs(row.mean - r.report.at(c, m).mean) <= 5e-5);
        CHECK(std::abs(row.half_width - r.report.at(c, m).half_width) <= 5e-5);
        CHECK(row.n == r.report.at(c, m).n);
      }
  CHECK_THROWS_AS(parse_report_csv("bogus\n"), ConfigError);
}

}  // TEST_SUITE
