#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctnet/tensor.hpp"

// Reverse-mode differentiation over whole tensors.
//
// A Tape stores every forward value in recording order together with a
// backward rule. Values created with Tape::variable() are tracked; an
// operation output is tracked iff one of its inputs is. backward() walks the
// tape once in reverse and accumulates adjoints for tracked values only.
namespace ctnet::ad {

class Tape;
class Gradients;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;
};

struct BackwardArgs {
  const Tape& tape;
  std::span<const std::size_t> inputs;
  const Tensor& output;
  const Tensor& grad_output;
  // One slot per input; nullptr when that input is not tracked. Rules add into
  // the pointed-to buffers, which are pre-sized to the input's shape.
  std::span<Tensor* const> grad_inputs;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class Gradients;
  friend Gradients backward(const Tape& tape, Var seed);

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool tracked = false;
  };
  std::vector<Node> nodes_;
};

// Result of a backward pass: d(seed)/d(value) for every tape entry.
class Gradients {
 public:
  // Gradient of the seed with respect to v; zeros when v was not reached.
  Tensor wrt(Var v) const;
  // nullptr when v was not reached.
  const Tensor* find(Var v) const;

 private:
  friend Gradients backward(const Tape& tape, Var seed);
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
  std::vector<bool> reached_;
};

// Reverse accumulation from a single-element seed.
Gradients backward(const Tape& tape, Var seed);

// ---------------------------------------------------------------------------
// Primitive operations. Binary elementwise ops require equal shapes, except
// that either operand may be a single-element tensor, which is broadcast.

Var matmul(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var relu(Var a);  // max(a, 0)
Var sigmoid(Var a);
Var log(Var a);  // throws DomainError on non-positive input
Var exp(Var a);
Var swish(Var a);  // a * sigmoid(a)
Var scale(Var a, double k);
Var add_scalar(Var a, double k);

enum class Elementwise { add, sub, mul, relu, sigmoid, log, exp };
// Dispatching front end; b is ignored for unary ops.
Var elementwise(Elementwise op, Var a, Var b = {});

Var sum(Var a);
Var mean(Var a);
// Reduction over the listed axes; the reduced axes are removed from the shape.
Var sum(Var a, std::vector<std::size_t> axes);
Var mean(Var a, std::vector<std::size_t> axes);

Var reshape(Var a, Shape shape);

// ---------------------------------------------------------------------------
// Network kernels (NCHW layout).

enum class Padding { same, valid };

struct ConvGeometry {
  std::size_t out_h = 0, out_w = 0;
  std::size_t pad_top = 0, pad_left = 0;
};

// "same": output = ceil(in / stride), padding split with the extra row/column
// at the bottom/right. "valid": output = floor((in - k) / stride) + 1.
ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw, std::size_t stride,
                           Padding padding);

// x[N,C,H,W] * w[O,C,KH,KW] (+ bias[O]); cross-correlation, no kernel flip.
// Pass an unset Var{} for no bias.
Var conv2d(Var x, Var w, Var bias, std::size_t stride, Padding padding);
// x[N,C,H,W] * w[C,1,KH,KW]; each channel filtered independently.
Var depthwise_conv2d(Var x, Var w, std::size_t stride, Padding padding);

struct BatchStats {
  Tensor mean;
  Tensor variance;  // biased (population) variance over N, H, W
};

// Normalizes with the batch's own statistics; stats receives them if non-null.
Var batch_norm_train(Var x, Var gamma, Var beta, double epsilon, BatchStats* stats = nullptr);
// Normalizes with fixed statistics.
Var batch_norm_infer(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& variance, double epsilon);

// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);
// x[N,C,H,W] * gate[N,C] broadcast over H, W.
Var scale_channels(Var x, Var gate);
// x[N,in] @ w[in,out] + b[out]; unset b means no bias.
Var linear(Var x, Var w, Var b);
// Row-wise softmax of [N,K].
Var softmax(Var logits);
// Mean over rows of -sum_k t_k log(p_k + 1e-12), p and t both [N,K].
Var cross_entropy(Var probs, Var targets);
// Elementwise product with a fixed mask (already scaled by 1/keep).
Var apply_mask(Var x, const Tensor& mask);

// ---------------------------------------------------------------------------

using ScalarFunction = std::function<Var(Tape&, Var)>;

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every component; otherwise a seeded random subset of this size.
  std::size_t max_components = 0;
  std::uint64_t seed = 0;
};

// Max over checked components of |autodiff - central difference| / (|central difference| + 1e-12).
// Throws DomainError if f produces a non-finite value.
double gradient_check(const ScalarFunction& f, const Tensor& x, double step = 1e-5);
double gradient_check(const ScalarFunction& f, const Tensor& x, const GradCheckOptions& options);

}  // namespace ctnet::ad
