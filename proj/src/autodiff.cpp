#include "ctnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctnet/error.hpp"
#include "ctnet/rng.hpp"

namespace ctnet::ad {

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (tape == nullptr) throw std::logic_error("unset Var");
  return tape->value(id);
}

bool Var::tracked() const { return tape != nullptr && tape->tracked(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool tracked = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw std::logic_error("tape input recorded out of order");
    tracked = tracked || nodes_[id].tracked;
  }
  if (!tracked) {
    inputs.clear();
    backward = nullptr;
  }
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), tracked});
  return Var{this, nodes_.size() - 1};
}

Tensor Gradients::wrt(Var v) const {
  if (const Tensor* g = find(v)) return *g;
  return Tensor(v.value().shape(), 0.0);
}

const Tensor* Gradients::find(Var v) const {
  if (v.tape != tape_) throw std::invalid_argument("gradient requested for a value from another tape");
  if (v.id >= reached_.size() || !reached_[v.id]) return nullptr;
  return &grads_[v.id];
}

Gradients backward(const Tape& tape, Var seed) {
  if (seed.tape != &tape || seed.id >= tape.size()) throw std::invalid_argument("backward seed is not on this tape");
  const Tensor& seed_value = tape.value(seed.id);
  if (seed_value.size() != 1) {
    throw DimensionError("backward seed must be a scalar, got shape " + shape_string(seed_value.shape()));
  }

  Gradients g;
  g.tape_ = &tape;
  g.grads_.resize(seed.id + 1);
  g.reached_.assign(seed.id + 1, false);
  g.grads_[seed.id] = Tensor(seed_value.shape(), 1.0);
  g.reached_[seed.id] = true;

  std::vector<Tensor*> slots;
  for (std::size_t id = seed.id + 1; id-- > 0;) {
    if (!g.reached_[id]) continue;
    const auto& node = tape.nodes_[id];
    if (!node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const auto in = node.inputs[j];
      if (!tape.nodes_[in].tracked) continue;
      if (!g.reached_[in]) {
        g.grads_[in] = Tensor(tape.nodes_[in].value.shape(), 0.0);
        g.reached_[in] = true;
      }
      slots[j] = &g.grads_[in];
    }
    node.backward(BackwardArgs{tape, node.inputs, node.value, g.grads_[id], slots});
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw std::invalid_argument("operation on an unset Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw std::invalid_argument("operands recorded on different tapes");
  return t;
}

enum class Broadcast { none, left_scalar, right_scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.size() == 1) return Broadcast::right_scalar;
  if (a.size() == 1) return Broadcast::left_scalar;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
}

// Accumulates d into grad, summing to a scalar when grad is a broadcast operand.
void accumulate(Tensor* grad, std::span<const double> d) {
  if (grad == nullptr) return;
  auto gd = grad->data();
  if (gd.size() == d.size()) {
    for (std::size_t i = 0; i < d.size(); ++i) gd[i] += d[i];
  } else {
    gd[0] += std::accumulate(d.begin(), d.end(), 0.0);
  }
}

template <class F, class DA, class DB>
Var binary(const char* name, Var a, Var b, F f, DA dfa, DB dfb) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, name);
  const Shape& shape = kind == Broadcast::left_scalar ? bv.shape() : av.shape();
  Tensor out(shape);
  const std::size_t n = out.size();
  const std::size_t sa = kind == Broadcast::left_scalar ? 0 : 1;
  const std::size_t sb = kind == Broadcast::right_scalar ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * sa], bv[i * sb]);
  return t.record(std::move(out), {a.id, b.id}, [=](const BackwardArgs& args) {
    const Tensor& x = args.tape.value(args.inputs[0]);
    const Tensor& y = args.tape.value(args.inputs[1]);
    std::vector<double> d(n);
    if (args.grad_inputs[0]) {
      for (std::size_t i = 0; i < n; ++i) d[i] = args.grad_output[i] * dfa(x[i * sa], y[i * sb]);
      accumulate(args.grad_inputs[0], d);
    }
    if (args.grad_inputs[1]) {
      for (std::size_t i = 0; i < n; ++i) d[i] = args.grad_output[i] * dfb(x[i * sa], y[i * sb]);
      accumulate(args.grad_inputs[1], d);
    }
  });
}

// f maps x to y; df maps (x, y) to dy/dx.
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return t.record(std::move(out), {a.id}, [=](const BackwardArgs& args) {
    const Tensor& x = args.tape.value(args.inputs[0]);
    auto g = args.grad_inputs[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += args.grad_output[i] * df(x[i], args.output[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var swish(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  std::vector<double> sig(av.size());
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    sig[i] = stable_sigmoid(av[i]);
    out[i] = av[i] * sig[i];
  }
  return t.record(std::move(out), {a.id}, [sig = std::move(sig)](const BackwardArgs& args) {
    const Tensor& x = args.tape.value(args.inputs[0]);
    auto g = args.grad_inputs[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += args.grad_output[i] * (sig[i] + x[i] * sig[i] * (1.0 - sig[i]));
    }
  });
}

Var scale(Var a, double k) {
  return unary(
      a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Var add_scalar(Var a, double k) {
  return unary(
      a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

Var elementwise(Elementwise op, Var a, Var b) {
  switch (op) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::log: return log(a);
    case Elementwise::exp: return exp(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Reductions and shape

namespace {

// For each input element, the flat index of the output element it reduces into.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<std::size_t>& axes, Shape& out_shape) {
  if (axes.empty()) throw DimensionError("reduction over an empty axis list");
  std::vector<bool> reduced(shape.size(), false);
  for (auto ax : axes) {
    if (ax >= shape.size()) {
      throw DimensionError("reduction axis " + std::to_string(ax) + " invalid for shape " + shape_string(shape));
    }
    if (reduced[ax]) throw DimensionError("reduction axis " + std::to_string(ax) + " listed twice");
    reduced[ax] = true;
  }
  out_shape.clear();
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (!reduced[d]) out_shape.push_back(shape[d]);
  }
  // Output stride contributed by each input axis (0 for reduced axes).
  std::vector<std::size_t> stride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (!reduced[d]) {
      stride[d] = s;
      s *= shape[d];
    }
  }
  const std::size_t n = shape_size(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t out = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = out;
    for (std::size_t d = shape.size(); d-- > 0;) {
      ++idx[d];
      out += stride[d];
      if (idx[d] < shape[d]) break;
      out -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

Var reduce(Var a, std::vector<std::size_t> axes, bool average) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Shape out_shape;
  auto map = reduction_map(av.shape(), axes, out_shape);
  Tensor out(out_shape, 0.0);
  const double k = average ? static_cast<double>(out.size()) / static_cast<double>(av.size()) : 1.0;
  for (std::size_t i = 0; i < av.size(); ++i) out[map[i]] += av[i];
  if (average) {
    const double count = static_cast<double>(av.size() / out.size());
    for (auto& v : out.data()) v /= count;
    // The rounded sum of equal values need not divide back exactly, so
    // constant groups take their value directly.
    std::vector<double> first(out.size(), 0.0);
    std::vector<char> seen(out.size(), 0), constant(out.size(), 1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const std::size_t o = map[i];
      if (!seen[o]) {
        seen[o] = 1;
        first[o] = av[i];
      } else if (av[i] != first[o]) {
        constant[o] = 0;
      }
    }
    for (std::size_t o = 0; o < out.size(); ++o)
      if (constant[o] && seen[o]) out[o] = first[o];
  }
  return t.record(std::move(out), {a.id}, [map = std::move(map), k](const BackwardArgs& args) {
    auto g = args.grad_inputs[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * args.grad_output[map[i]];
  });
}

std::vector<std::size_t> all_axes(const Tensor& t) {
  std::vector<std::size_t> axes(t.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return axes;
}

}  // namespace

Var sum(Var a, std::vector<std::size_t> axes) { return reduce(a, std::move(axes), false); }
Var mean(Var a, std::vector<std::size_t> axes) { return reduce(a, std::move(axes), true); }

Var sum(Var a) {
  if (a.value().rank() == 0) return reshape(a, {});
  return sum(a, all_axes(a.value()));
}

Var mean(Var a) {
  if (a.value().rank() == 0) return reshape(a, {});
  return mean(a, all_axes(a.value()));
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return t.record(std::move(out), {a.id}, [](const BackwardArgs& args) {
    auto g = args.grad_inputs[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += args.grad_output[i];
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return t.record(std::move(out), {a.id, b.id}, [m, k, n](const BackwardArgs& args) {
    const Tensor& x = args.tape.value(args.inputs[0]);
    const Tensor& y = args.tape.value(args.inputs[1]);
    const Tensor& g = args.grad_output;
    if (Tensor* ga = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (Tensor* gb = args.grad_inputs[1]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = x[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += xip * g[i * n + j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw, std::size_t stride,
                           Padding padding) {
  if (stride == 0) throw std::invalid_argument("convolution stride must be positive");
  ConvGeometry g;
  if (padding == Padding::same) {
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + kh;
    const std::size_t need_w = (g.out_w - 1) * stride + kw;
    g.pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
    g.pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
  } else {
    if (in_h < kh || in_w < kw) throw DimensionError("valid convolution kernel larger than input");
    g.out_h = (in_h - kh) / stride + 1;
    g.out_w = (in_w - kw) / stride + 1;
  }
  return g;
}

namespace {

struct Range {
  std::size_t begin = 0, end = 0;  // half-open
};

// Output positions o with 0 <= o*stride + k - pad < in.
Range valid_outputs(std::size_t out, std::size_t in, std::size_t k, std::size_t pad, std::size_t stride) {
  const long long lo_num = static_cast<long long>(pad) - static_cast<long long>(k);
  long long begin = lo_num > 0 ? (lo_num + static_cast<long long>(stride) - 1) / static_cast<long long>(stride) : 0;
  const long long hi_num = static_cast<long long>(in) - 1 + static_cast<long long>(pad) - static_cast<long long>(k);
  if (hi_num < 0) return {};
  long long end = hi_num / static_cast<long long>(stride) + 1;
  end = std::min<long long>(end, static_cast<long long>(out));
  if (begin >= end) return {};
  return {static_cast<std::size_t>(begin), static_cast<std::size_t>(end)};
}

struct PlaneGeometry {
  std::size_t h, w, oh, ow, kh, kw, stride, pt, pl;
};

// out_plane += w * correlate(in_plane) for one kernel plane.
void correlate_plane(const double* in, const double* kernel, double* out, const PlaneGeometry& g) {
  for (std::size_t i = 0; i < g.kh; ++i) {
    const Range rh = valid_outputs(g.oh, g.h, i, g.pt, g.stride);
    for (std::size_t j = 0; j < g.kw; ++j) {
      const Range rw = valid_outputs(g.ow, g.w, j, g.pl, g.stride);
      if (rw.begin >= rw.end) continue;
      const double wv = kernel[i * g.kw + j];
      const std::size_t len = rw.end - rw.begin;
      for (std::size_t oh = rh.begin; oh < rh.end; ++oh) {
        const double* src = in + (oh * g.stride + i - g.pt) * g.w + (rw.begin * g.stride + j - g.pl);
        double* dst = out + oh * g.ow + rw.begin;
        if (g.stride == 1) {
          for (std::size_t q = 0; q < len; ++q) dst[q] += wv * src[q];
        } else {
          for (std::size_t q = 0; q < len; ++q) dst[q] += wv * src[q * g.stride];
        }
      }
    }
  }
}

// Four-way split accumulation; the summation order is fixed, so results are
// reproducible while still letting the compiler vectorize.
inline double dot(const double* a, const double* b, std::size_t n, std::size_t stride_b = 1) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t q = 0;
  if (stride_b == 1) {
    for (; q + 4 <= n; q += 4) {
      s0 += a[q] * b[q];
      s1 += a[q + 1] * b[q + 1];
      s2 += a[q + 2] * b[q + 2];
      s3 += a[q + 3] * b[q + 3];
    }
  }
  for (; q < n; ++q) s0 += a[q] * b[q * stride_b];
  return (s0 + s1) + (s2 + s3);
}

// gkernel += sum over outputs of gout * in (correlation adjoint w.r.t. the kernel).
void correlate_plane_kernel_grad(const double* in, const double* gout, double* gkernel, const PlaneGeometry& g) {
  for (std::size_t i = 0; i < g.kh; ++i) {
    const Range rh = valid_outputs(g.oh, g.h, i, g.pt, g.stride);
    for (std::size_t j = 0; j < g.kw; ++j) {
      const Range rw = valid_outputs(g.ow, g.w, j, g.pl, g.stride);
      if (rw.begin >= rw.end) continue;
      const std::size_t len = rw.end - rw.begin;
      double acc = 0;
      for (std::size_t oh = rh.begin; oh < rh.end; ++oh) {
        const double* src = in + (oh * g.stride + i - g.pt) * g.w + (rw.begin * g.stride + j - g.pl);
        acc += dot(gout + oh * g.ow + rw.begin, src, len, g.stride);
      }
      gkernel[i * g.kw + j] += acc;
    }
  }
}

// gin += correlation adjoint w.r.t. the input.
void correlate_plane_input_grad(const double* kernel, const double* gout, double* gin, const PlaneGeometry& g) {
  for (std::size_t i = 0; i < g.kh; ++i) {
    const Range rh = valid_outputs(g.oh, g.h, i, g.pt, g.stride);
    for (std::size_t j = 0; j < g.kw; ++j) {
      const Range rw = valid_outputs(g.ow, g.w, j, g.pl, g.stride);
      if (rw.begin >= rw.end) continue;
      const double wv = kernel[i * g.kw + j];
      const std::size_t len = rw.end - rw.begin;
      for (std::size_t oh = rh.begin; oh < rh.end; ++oh) {
        double* dst = gin + (oh * g.stride + i - g.pt) * g.w + (rw.begin * g.stride + j - g.pl);
        const double* go = gout + oh * g.ow + rw.begin;
        if (g.stride == 1) {
          for (std::size_t q = 0; q < len; ++q) dst[q] += wv * go[q];
        } else {
          for (std::size_t q = 0; q < len; ++q) dst[q * g.stride] += wv * go[q];
        }
      }
    }
  }
}

// Pointwise (1x1, stride 1) convolution is a per-image GEMM: out[O,P] += W[O,C] x[C,P].
// dst[r] += sum_j a[r * lda + j] * src[j] over rows r, four rows per sweep so
// every source element is loaded once per group.
void axpy_rows(const double* a, std::size_t lda, std::size_t a_step, std::size_t rows, std::size_t cols,
               const double* src, double* dst, std::size_t plane) {
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    double* d0 = dst + r * plane;
    double* d1 = d0 + plane;
    double* d2 = d1 + plane;
    double* d3 = d2 + plane;
    for (std::size_t j = 0; j < cols; ++j) {
      const double w0 = a[r * lda + j * a_step], w1 = a[(r + 1) * lda + j * a_step];
      const double w2 = a[(r + 2) * lda + j * a_step], w3 = a[(r + 3) * lda + j * a_step];
      const double* sp = src + j * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const double v = sp[q];
        d0[q] += w0 * v;
        d1[q] += w1 * v;
        d2[q] += w2 * v;
        d3[q] += w3 * v;
      }
    }
  }
  for (; r < rows; ++r) {
    double* d = dst + r * plane;
    for (std::size_t j = 0; j < cols; ++j) {
      const double wv = a[r * lda + j * a_step];
      const double* sp = src + j * plane;
      for (std::size_t q = 0; q < plane; ++q) d[q] += wv * sp[q];
    }
  }
}

void pointwise_forward(const double* x, const double* w, double* out, std::size_t c, std::size_t o,
                       std::size_t plane) {
  axpy_rows(w, c, 1, o, c, x, out, plane);
}

void pointwise_input_grad(const double* w, const double* g, double* gx, std::size_t c, std::size_t o,
                          std::size_t plane) {
  axpy_rows(w, 1, c, c, o, g, gx, plane);
}

void pointwise_kernel_grad(const double* x, const double* g, double* gw, std::size_t c, std::size_t o,
                           std::size_t plane) {
  for (std::size_t f = 0; f < o; ++f)
    for (std::size_t ch = 0; ch < c; ++ch) gw[f * c + ch] += dot(g + f * plane, x + ch * plane, plane);
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, std::size_t stride, Padding padding) {
  Tape& t = tape_of(x, w);
  const bool has_bias = bias.tape != nullptr;
  if (has_bias && bias.tape != &t) throw std::invalid_argument("operands recorded on different tapes");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4) {
    throw DimensionError("conv2d expects NCHW input and OCKK weights, got " + shape_string(xv.shape()) + " and " +
                         shape_string(wv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != c) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(xv.shape()) + ", weights " +
                         shape_string(wv.shape()));
  }
  if (has_bias && (bias.value().rank() != 1 || bias.value().dim(0) != o)) {
    throw DimensionError("conv2d bias shape " + shape_string(bias.value().shape()) + " for " + std::to_string(o) +
                         " filters");
  }
  const ConvGeometry geo = conv_geometry(h, wd, kh, kw, stride, padding);
  const PlaneGeometry pg{h, wd, geo.out_h, geo.out_w, kh, kw, stride, geo.pad_top, geo.pad_left};
  const std::size_t in_plane = h * wd, out_plane = geo.out_h * geo.out_w, kplane = kh * kw;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1;

  Tensor out({n, o, geo.out_h, geo.out_w}, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    double* dst = out.data().data() + b * o * out_plane;
    if (has_bias) {
      for (std::size_t f = 0; f < o; ++f) std::fill(dst + f * out_plane, dst + (f + 1) * out_plane, bias.value()[f]);
    }
    const double* src = xv.data().data() + b * c * in_plane;
    if (pointwise) {
      pointwise_forward(src, wv.data().data(), dst, c, o, in_plane);
      continue;
    }
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t ch = 0; ch < c; ++ch)
        correlate_plane(src + ch * in_plane, wv.data().data() + (f * c + ch) * kplane, dst + f * out_plane, pg);
  }

  std::vector<std::size_t> inputs{x.id, w.id};
  if (has_bias) inputs.push_back(bias.id);
  return t.record(std::move(out), std::move(inputs), [=](const BackwardArgs& args) {
    const Tensor& xin = args.tape.value(args.inputs[0]);
    const Tensor& kern = args.tape.value(args.inputs[1]);
    const Tensor& g = args.grad_output;
    Tensor* gx = args.grad_inputs[0];
    Tensor* gw = args.grad_inputs[1];
    for (std::size_t b = 0; b < n; ++b) {
      const double* go = g.data().data() + b * o * out_plane;
      const double* src = xin.data().data() + b * c * in_plane;
      if (pointwise) {
        if (gx) pointwise_input_grad(kern.data().data(), go, gx->data().data() + b * c * in_plane, c, o, in_plane);
        if (gw) pointwise_kernel_grad(src, go, gw->data().data(), c, o, in_plane);
        continue;
      }
      for (std::size_t f = 0; f < o; ++f)
        for (std::size_t ch = 0; ch < c; ++ch) {
          if (gx) {
            correlate_plane_input_grad(kern.data().data() + (f * c + ch) * kplane, go + f * out_plane,
                                       gx->data().data() + (b * c + ch) * in_plane, pg);
          }
          if (gw) {
            correlate_plane_kernel_grad(src + ch * in_plane, go + f * out_plane,
                                        gw->data().data() + (f * c + ch) * kplane, pg);
          }
        }
    }
    if (has_bias && args.grad_inputs[2]) {
      Tensor& gb = *args.grad_inputs[2];
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t f = 0; f < o; ++f) {
          const double* go = g.data().data() + (b * o + f) * out_plane;
          gb[f] += std::accumulate(go, go + out_plane, 0.0);
        }
    }
  });
}

Var depthwise_conv2d(Var x, Var w, std::size_t stride, Padding padding) {
  Tape& t = tape_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != 1) {
    throw DimensionError("depthwise_conv2d expects NCHW input and Cx1xKxK weights, got " + shape_string(xv.shape()) +
                         " and " + shape_string(wv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(0) != c) {
    throw DimensionError("depthwise_conv2d: " + std::to_string(wv.dim(0)) + " kernels for " + std::to_string(c) +
                         " channels");
  }
  const ConvGeometry geo = conv_geometry(h, wd, kh, kw, stride, padding);
  const PlaneGeometry pg{h, wd, geo.out_h, geo.out_w, kh, kw, stride, geo.pad_top, geo.pad_left};
  const std::size_t in_plane = h * wd, out_plane = geo.out_h * geo.out_w, kplane = kh * kw;

  Tensor out({n, c, geo.out_h, geo.out_w}, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      correlate_plane(xv.data().data() + (b * c + ch) * in_plane, wv.data().data() + ch * kplane,
                      out.data().data() + (b * c + ch) * out_plane, pg);

  return t.record(std::move(out), {x.id, w.id}, [=](const BackwardArgs& args) {
    const Tensor& xin = args.tape.value(args.inputs[0]);
    const Tensor& kern = args.tape.value(args.inputs[1]);
    Tensor* gx = args.grad_inputs[0];
    Tensor* gw = args.grad_inputs[1];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* go = args.grad_output.data().data() + (b * c + ch) * out_plane;
        if (gx) {
          correlate_plane_input_grad(kern.data().data() + ch * kplane, go,
                                     gx->data().data() + (b * c + ch) * in_plane, pg);
        }
        if (gw) {
          correlate_plane_kernel_grad(xin.data().data() + (b * c + ch) * in_plane, go,
                                      gw->data().data() + ch * kplane, pg);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization, pooling, heads

namespace {

void check_channel_params(const Tensor& x, const Tensor& p, const char* what) {
  if (x.rank() != 4) throw DimensionError(std::string(what) + " expects NCHW input, got " + shape_string(x.shape()));
  if (p.rank() != 1 || p.dim(0) != x.dim(1)) {
    throw DimensionError(std::string(what) + ": parameter shape " + shape_string(p.shape()) + " for input " +
                         shape_string(x.shape()));
  }
}

}  // namespace

Var batch_norm_train(Var x, Var gamma, Var beta, double epsilon, BatchStats* stats) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  const Tensor& xv = x.value();
  check_channel_params(xv, gamma.value(), "batch_norm");
  check_channel_params(xv, beta.value(), "batch_norm");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  const double count = static_cast<double>(n * plane);

  std::vector<double> mean(c, 0.0), var(c, 0.0), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = xv.data().data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    mean[ch] = s / count;
    double ss = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = xv.data().data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean[ch]) * (p[i] - mean[ch]);
    }
    var[ch] = ss / count;
    inv_std[ch] = 1.0 / std::sqrt(var[ch] + epsilon);
  }
  if (stats) {
    stats->mean = Tensor({c}, mean);
    stats->variance = Tensor({c}, var);
  }

  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = xv.data().data() + (b * c + ch) * plane;
      double* q = out.data().data() + (b * c + ch) * plane;
      const double k = gv[ch] * inv_std[ch];
      for (std::size_t i = 0; i < plane; ++i) q[i] = k * (p[i] - mean[ch]) + bv[ch];
    }

  return t.record(std::move(out), {x.id, gamma.id, beta.id},
                  [=, mean = std::move(mean), inv_std = std::move(inv_std)](const BackwardArgs& args) {
                    const Tensor& xin = args.tape.value(args.inputs[0]);
                    const Tensor& gam = args.tape.value(args.inputs[1]);
                    const Tensor& g = args.grad_output;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      double sum_g = 0, sum_gx = 0;
                      for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t off = (b * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                          const double xhat = (xin[off + i] - mean[ch]) * inv_std[ch];
                          sum_g += g[off + i];
                          sum_gx += g[off + i] * xhat;
                        }
                      }
                      if (args.grad_inputs[1]) (*args.grad_inputs[1])[ch] += sum_gx;
                      if (args.grad_inputs[2]) (*args.grad_inputs[2])[ch] += sum_g;
                      if (Tensor* gx = args.grad_inputs[0]) {
                        const double k = gam[ch] * inv_std[ch] / count;
                        for (std::size_t b = 0; b < n; ++b) {
                          const std::size_t off = (b * c + ch) * plane;
                          for (std::size_t i = 0; i < plane; ++i) {
                            const double xhat = (xin[off + i] - mean[ch]) * inv_std[ch];
                            (*gx)[off + i] += k * (count * g[off + i] - sum_g - xhat * sum_gx);
                          }
                        }
                      }
                    }
                  });
}

Var batch_norm_infer(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& variance, double epsilon) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  const Tensor& xv = x.value();
  check_channel_params(xv, gamma.value(), "batch_norm");
  check_channel_params(xv, beta.value(), "batch_norm");
  check_channel_params(xv, mean, "batch_norm");
  check_channel_params(xv, variance, "batch_norm");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  std::vector<double> inv_std(c), mu(mean.data().begin(), mean.data().end());
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(variance[ch] + epsilon);

  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = xv.data().data() + (b * c + ch) * plane;
      double* q = out.data().data() + (b * c + ch) * plane;
      const double k = gv[ch] * inv_std[ch];
      for (std::size_t i = 0; i < plane; ++i) q[i] = k * (p[i] - mu[ch]) + bv[ch];
    }

  return t.record(std::move(out), {x.id, gamma.id, beta.id},
                  [=, mu = std::move(mu), inv_std = std::move(inv_std)](const BackwardArgs& args) {
                    const Tensor& xin = args.tape.value(args.inputs[0]);
                    const Tensor& gam = args.tape.value(args.inputs[1]);
                    const Tensor& g = args.grad_output;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      double sum_g = 0, sum_gx = 0;
                      const double k = gam[ch] * inv_std[ch];
                      for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t off = (b * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                          sum_g += g[off + i];
                          sum_gx += g[off + i] * (xin[off + i] - mu[ch]) * inv_std[ch];
                          if (args.grad_inputs[0]) (*args.grad_inputs[0])[off + i] += k * g[off + i];
                        }
                      }
                      if (args.grad_inputs[1]) (*args.grad_inputs[1])[ch] += sum_gx;
                      if (args.grad_inputs[2]) (*args.grad_inputs[2])[ch] += sum_g;
                    }
                  });
}

Var global_avg_pool(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("global_avg_pool expects NCHW input, got " + shape_string(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const double* p = xv.data().data() + i * plane;
    const bool constant = std::all_of(p, p + plane, [&](double v) { return v == p[0]; });
    out[i] = constant ? p[0] : std::accumulate(p, p + plane, 0.0) / static_cast<double>(plane);
  }
  return t.record(std::move(out), {x.id}, [n, c, plane](const BackwardArgs& args) {
    double* gx = args.grad_inputs[0]->data().data();
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < n * c; ++i) {
      const double gi = args.grad_output[i] * inv;
      for (std::size_t j = 0; j < plane; ++j) gx[i * plane + j] += gi;
    }
  });
}

Var scale_channels(Var x, Var gate) {
  Tape& t = tape_of(x, gate);
  const Tensor& xv = x.value();
  const Tensor& gv = gate.value();
  if (xv.rank() != 4 || gv.rank() != 2 || gv.dim(0) != xv.dim(0) || gv.dim(1) != xv.dim(1)) {
    throw DimensionError("scale_channels: input " + shape_string(xv.shape()) + ", gate " + shape_string(gv.shape()));
  }
  const std::size_t nc = xv.dim(0) * xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < plane; ++j) out[i * plane + j] = xv[i * plane + j] * gv[i];
  return t.record(std::move(out), {x.id, gate.id}, [nc, plane](const BackwardArgs& args) {
    const Tensor& xin = args.tape.value(args.inputs[0]);
    const Tensor& gin = args.tape.value(args.inputs[1]);
    const Tensor& g = args.grad_output;
    for (std::size_t i = 0; i < nc; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < plane; ++j) {
        acc += g[i * plane + j] * xin[i * plane + j];
        if (args.grad_inputs[0]) (*args.grad_inputs[0])[i * plane + j] += g[i * plane + j] * gin[i];
      }
      if (args.grad_inputs[1]) (*args.grad_inputs[1])[i] += acc;
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  if (b.tape == nullptr) return y;
  Tape& t = tape_of(y, b);
  const Tensor& yv = y.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || bv.dim(0) != yv.dim(1)) {
    throw DimensionError("linear: bias " + shape_string(bv.shape()) + " for output " + shape_string(yv.shape()));
  }
  const std::size_t n = yv.dim(0), m = yv.dim(1);
  Tensor out = yv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bv[j];
  return t.record(std::move(out), {y.id, b.id}, [n, m](const BackwardArgs& args) {
    const Tensor& g = args.grad_output;
    if (Tensor* gy = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < n * m; ++i) (*gy)[i] += g[i];
    }
    if (Tensor* gb = args.grad_inputs[1]) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g[i * m + j];
    }
  });
}

Var softmax(Var logits) {
  Tape& t = tape_of(logits);
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("softmax expects [N,K] logits, got " + shape_string(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(row[j] - mx);
      s += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
  }
  return t.record(std::move(out), {logits.id}, [n, k](const BackwardArgs& args) {
    const Tensor& y = args.output;
    const Tensor& g = args.grad_output;
    Tensor& gz = *args.grad_inputs[0];
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * y[i * k + j];
      for (std::size_t j = 0; j < k; ++j) gz[i * k + j] += y[i * k + j] * (g[i * k + j] - dot);
    }
  });
}

Var cross_entropy(Var probs, Var targets) {
  constexpr double kFloor = 1e-12;
  Tape& t = tape_of(probs, targets);
  const Tensor& p = probs.value();
  const Tensor& q = targets.value();
  if (p.rank() != 2 || p.shape() != q.shape()) {
    throw DimensionError("cross_entropy: probabilities " + shape_string(p.shape()) + ", targets " +
                         shape_string(q.shape()));
  }
  const double n = static_cast<double>(p.dim(0));
  double loss = 0;
  for (std::size_t i = 0; i < p.size(); ++i) loss -= q[i] * std::log(p[i] + kFloor);
  return t.record(Tensor::scalar(loss / n), {probs.id, targets.id}, [n](const BackwardArgs& args) {
    const Tensor& pv = args.tape.value(args.inputs[0]);
    const Tensor& qv = args.tape.value(args.inputs[1]);
    const double g = args.grad_output[0] / n;
    if (Tensor* gp = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] -= g * qv[i] / (pv[i] + kFloor);
    }
    if (Tensor* gq = args.grad_inputs[1]) {
      for (std::size_t i = 0; i < pv.size(); ++i) (*gq)[i] -= g * std::log(pv[i] + kFloor);
    }
  });
}

Var apply_mask(Var x, const Tensor& mask) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.shape() != mask.shape()) throw DimensionError("apply_mask: shape mismatch");
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return t.record(std::move(out), {x.id}, [mask](const BackwardArgs& args) {
    auto g = args.grad_inputs[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += args.grad_output[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference validation

namespace {

double evaluate_scalar(const ScalarFunction& f, const Tensor& x) {
  Tape t;
  Var y = f(t, t.constant(x));
  const double v = y.value().item();
  if (!std::isfinite(v)) throw DomainError("gradient_check: function value is not finite");
  return v;
}

}  // namespace

double gradient_check(const ScalarFunction& f, const Tensor& x, double step) {
  return gradient_check(f, x, GradCheckOptions{step, 0, 0});
}

double gradient_check(const ScalarFunction& f, const Tensor& x, const GradCheckOptions& options) {
  if (!(options.step > 0)) throw std::invalid_argument("gradient_check step must be positive");
  Tape t;
  Var xv = t.variable(x);
  Var y = f(t, xv);
  if (y.value().size() != 1) throw DimensionError("gradient_check: function must return a scalar");
  if (!std::isfinite(y.value()[0])) throw DomainError("gradient_check: function value is not finite");
  const Tensor grad = backward(t, y).wrt(xv);
  for (double v : grad.data()) {
    if (!std::isfinite(v)) throw DomainError("gradient_check: gradient is not finite");
  }

  std::vector<std::size_t> components(x.size());
  std::iota(components.begin(), components.end(), 0);
  if (options.max_components > 0 && options.max_components < components.size()) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_components; ++i) {
      const std::size_t j = i + rng.below(components.size() - i);
      std::swap(components[i], components[j]);
    }
    components.resize(options.max_components);
  }

  double worst = 0;
  Tensor probe = x;
  for (auto i : components) {
    const double orig = probe[i];
    probe[i] = orig + options.step;
    const double fp = evaluate_scalar(f, probe);
    probe[i] = orig - options.step;
    const double fm = evaluate_scalar(f, probe);
    probe[i] = orig;
    const double fd = (fp - fm) / (2 * options.step);
    worst = std::max(worst, std::abs(grad[i] - fd) / (std::abs(fd) + 1e-12));
  }
  return worst;
}

}  // namespace ctnet::ad
