#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ctnet/autodiff.hpp"
#include "ctnet/rng.hpp"
#include "ctnet/tensor.hpp"

namespace testing {

inline ctnet::Tensor random_tensor(const ctnet::Shape& shape, ctnet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  ctnet::Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar probe: sum(out * weights) with fixed random weights, so every output
// component contributes a distinct amount to the gradient.
inline ctnet::ad::Var project(ctnet::ad::Tape& tape, ctnet::ad::Var out, std::uint64_t seed) {
  ctnet::Rng rng(seed);
  return ctnet::ad::sum(ctnet::ad::mul(out, tape.constant(random_tensor(out.shape(), rng, 0.5, 1.5))));
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ctnet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline double max_abs_diff(const ctnet::Tensor& a, const ctnet::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Gradient agreement that tolerates gradients which vanish identically, such
// as a shift feeding a train-mode batch norm: there the relative error compares
// two round-off values, so both sides must instead be absolutely tiny.
struct GradientAgreement {
  double relative_error = 0.0;
  bool vanishing = false;
  bool ok(double tolerance) const { return vanishing || relative_error < tolerance; }
};

inline GradientAgreement gradient_agreement(const ctnet::ad::ScalarFunction& f, const ctnet::Tensor& x,
                                            const ctnet::ad::GradCheckOptions& options = {}) {
  ctnet::ad::Tape tape;
  const auto v = tape.variable(x);
  const ctnet::Tensor g = ctnet::ad::backward(tape, f(tape, v)).wrt(v);
  double peak = 0;
  for (double d : g.data()) peak = std::max(peak, std::abs(d));
  if (peak < 1e-9) {
    double fd_peak = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      ctnet::Tensor p = x, m = x;
      p[i] += options.step;
      m[i] -= options.step;
      ctnet::ad::Tape tp, tm;
      const double d = (f(tp, tp.constant(p)).value().item() - f(tm, tm.constant(m)).value().item()) / (2 * options.step);
      fd_peak = std::max(fd_peak, std::abs(d));
    }
    if (fd_peak < 1e-7) return {0.0, true};
  }
  return {ctnet::ad::gradient_check(f, x, options), false};
}

}  // namespace testing
