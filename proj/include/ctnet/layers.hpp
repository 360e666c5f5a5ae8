#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ctnet/autodiff.hpp"
#include "ctnet/rng.hpp"
#include "ctnet/tensor.hpp"

namespace ctnet::nn {

using ad::Padding;

enum class Mode { train, infer };

enum class LayerKind { input, conv, depthwise_conv, batch_norm, activation, squeeze_excite, pool, dense, dropout,
                       softmax, add };

const char* to_string(LayerKind kind);

struct Parameter {
  std::string name;
  Tensor value;
  // Running statistics are stored and checkpointed but never optimized.
  bool trainable = true;
};

struct RecordedOutput {
  std::string name;
  LayerKind kind;
  ad::Var var;
};

// Per-forward-pass state shared by all layers: the tape, the mode, parameter
// bindings, the activation log and optional substitutions used by tests and
// saliency code.
class Context {
 public:
  Context(ad::Tape& tape, Mode mode) : tape_(tape), mode_(mode) {}

  ad::Tape& tape() { return tape_; }
  Mode mode() const { return mode_; }

  // Parameters become tracked tape leaves when set (training, gradient checks).
  void set_track_parameters(bool on) { track_parameters_ = on; }

  // Replaces a parameter's tape value with v for this pass.
  void override_parameter(const Parameter& p, ad::Var v) { param_overrides_[&p] = v; }
  // Replaces a named layer's output with a fixed tensor for this pass.
  void override_output(const std::string& layer, Tensor value) { output_overrides_[layer] = std::move(value); }

  // Re-records the named layer's output as a tracked leaf, so gradients can be
  // taken with respect to it; the graph upstream of it is cut.
  void watch_output(const std::string& layer) { watched_.insert(layer); }

  // Seed for dropout masks in train mode.
  void set_dropout_seed(std::uint64_t seed) { dropout_seed_ = seed; }

  // When set, train-mode batch norm folds batch statistics into the running
  // averages with this momentum instead of its own.
  void set_statistics_momentum(std::optional<double> m) { statistics_momentum_ = m; }
  std::optional<double> statistics_momentum() const { return statistics_momentum_; }
  std::uint64_t dropout_seed() const { return dropout_seed_; }

  ad::Var bind(Parameter& p);
  // Logs a named layer output and applies any output override.
  ad::Var emit(const std::string& name, LayerKind kind, ad::Var out);

  const std::vector<RecordedOutput>& outputs() const { return outputs_; }
  const std::vector<std::pair<Parameter*, ad::Var>>& bindings() const { return bindings_; }

 private:
  ad::Tape& tape_;
  Mode mode_;
  bool track_parameters_ = false;
  std::uint64_t dropout_seed_ = 0;
  std::optional<double> statistics_momentum_;
  std::map<const Parameter*, ad::Var> param_overrides_;
  std::map<std::string, Tensor> output_overrides_;
  std::set<std::string> watched_;
  std::map<const Parameter*, std::size_t> bound_index_;
  std::vector<std::pair<Parameter*, ad::Var>> bindings_;
  std::vector<RecordedOutput> outputs_;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const { return name_; }
  virtual LayerKind kind() const = 0;
  virtual ad::Var forward(Context& ctx, ad::Var x) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& out) { (void)out; }
  // Names of every individually recorded output, in emission order.
  virtual std::vector<std::string> recorded_names() const { return {name_}; }

 private:
  std::string name_;
};

// Identity; records the network input under its name.
class InputLayer : public Layer {
 public:
  using Layer::Layer;
  LayerKind kind() const override { return LayerKind::input; }
  ad::Var forward(Context& ctx, ad::Var x) override;
};

class Conv2D : public Layer {
 public:
  // Weights [out, in, k, k], He-normal truncated at 2 sigma; bias zero.
  Conv2D(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
         Padding padding, bool use_bias, Rng& rng);
  LayerKind kind() const override { return LayerKind::conv; }
  ad::Var forward(Context& ctx, ad::Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter& weights() { return weights_; }
  std::optional<Parameter>& bias() { return bias_; }

 private:
  Parameter weights_;
  std::optional<Parameter> bias_;
  std::size_t stride_;
  Padding padding_;
};

class DepthwiseConv2D : public Layer {
 public:
  DepthwiseConv2D(std::string name, std::size_t channels, std::size_t kernel, std::size_t stride, Padding padding,
                  Rng& rng);
  LayerKind kind() const override { return LayerKind::depthwise_conv; }
  ad::Var forward(Context& ctx, ad::Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter& weights() { return weights_; }

 private:
  Parameter weights_;
  std::size_t stride_;
  Padding padding_;
};

class BatchNorm : public Layer {
 public:
  static constexpr double kDefaultMomentum = 0.99;
  static constexpr double kDefaultEpsilon = 1e-3;

  BatchNorm(std::string name, std::size_t channels, double momentum = kDefaultMomentum,
            double epsilon = kDefaultEpsilon);
  LayerKind kind() const override { return LayerKind::batch_norm; }
  // Train mode normalizes with batch statistics and folds them into the
  // running averages; infer mode uses the running averages.
  ad::Var forward(Context& ctx, ad::Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  Parameter& running_mean() { return running_mean_; }
  Parameter& running_var() { return running_var_; }
  double momentum() const { return momentum_; }
  double epsilon() const { return epsilon_; }

 private:
  Parameter gamma_, beta_, running_mean_, running_var_;
  double momentum_, epsilon_;
};

enum class Activation { swish, relu, sigmoid };

class ActivationLayer : public Layer {
 public:
  ActivationLayer(std::string name, Activation fn) : Layer(std::move(name)), fn_(fn) {}
  LayerKind kind() const override { return LayerKind::activation; }
  ad::Var forward(Context& ctx, ad::Var x) override;

 private:
  Activation fn_;
};

class Dense : public Layer {
 public:
  // Weights [in, out], Glorot-uniform; bias zero.
  Dense(std::string name, std::size_t in, std::size_t out, bool use_bias, Rng& rng);
  LayerKind kind() const override { return LayerKind::dense; }
  ad::Var forward(Context& ctx, ad::Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter& weights() { return weights_; }
  std::optional<Parameter>& bias() { return bias_; }

 private:
  Parameter weights_;
  std::optional<Parameter> bias_;
};

// Squeeze-and-excitation: pool -> dense(swish) -> dense(sigmoid) -> channel gate.
class SqueezeExcite : public Layer {
 public:
  SqueezeExcite(std::string name, std::size_t channels, std::size_t squeezed, Rng& rng);
  LayerKind kind() const override { return LayerKind::squeeze_excite; }
  ad::Var forward(Context& ctx, ad::Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Dense& reduce() { return reduce_; }
  Dense& expand() { return expand_; }

 private:
  Dense reduce_, expand_;
};

class GlobalAvgPool : public Layer {
 public:
  using Layer::Layer;
  LayerKind kind() const override { return LayerKind::pool; }
  ad::Var forward(Context& ctx, ad::Var x) override;
};

// Inverted dropout; identity in infer mode.
class Dropout : public Layer {
 public:
  Dropout(std::string name, double rate);
  LayerKind kind() const override { return LayerKind::dropout; }
  ad::Var forward(Context& ctx, ad::Var x) override;

 private:
  double rate_;
};

class Softmax : public Layer {
 public:
  using Layer::Layer;
  LayerKind kind() const override { return LayerKind::softmax; }
  ad::Var forward(Context& ctx, ad::Var x) override;
};

struct MBConvConfig {
  double expansion = 1.0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  double se_ratio = 0.25;

  std::size_t expanded_channels() const;
  // Squeezed width of the SE bottleneck: ceil(in_ch * se_ratio); 0 disables SE.
  std::size_t squeezed_channels() const;
  bool has_skip() const { return stride == 1 && in_ch == out_ch; }
  void validate() const;
};

// Mobile inverted bottleneck: [expand 1x1 -> BN -> swish] -> depthwise -> BN
// -> swish -> [SE] -> project 1x1 -> BN [-> + input]. Every sub-layer is
// recorded under "<prefix>_<part>".
class MBConvBlock : public Layer {
 public:
  MBConvBlock(std::string prefix, const MBConvConfig& cfg, Rng& rng);
  LayerKind kind() const override;
  ad::Var forward(Context& ctx, ad::Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  std::vector<std::string> recorded_names() const override;

  const MBConvConfig& config() const { return cfg_; }

 private:
  MBConvConfig cfg_;
  std::unique_ptr<Conv2D> expand_conv_;
  std::unique_ptr<BatchNorm> expand_bn_;
  std::unique_ptr<ActivationLayer> expand_act_;
  DepthwiseConv2D dwconv_;
  BatchNorm bn_;
  ActivationLayer act_;
  std::unique_ptr<SqueezeExcite> se_;
  Conv2D project_conv_;
  BatchNorm project_bn_;
};

// ---------------------------------------------------------------------------
// Stand-alone tensor functions over explicit parameter values.

struct ConvParams {
  Tensor weights;  // [out, in, kh, kw]
  std::optional<Tensor> bias;
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

struct BatchNormState {
  Tensor gamma, beta, running_mean, running_var;
  double momentum = BatchNorm::kDefaultMomentum;
  double epsilon = BatchNorm::kDefaultEpsilon;
  Mode mode = Mode::infer;

  static BatchNormState identity(std::size_t channels);
};

struct SqueezeExciteParams {
  Tensor reduce_w, reduce_b;  // [C, S], [S]
  Tensor expand_w, expand_b;  // [S, C], [C]
};

Tensor conv2d(const Tensor& input, const ConvParams& p);
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, Padding padding);
// Updates the running statistics in train mode.
Tensor batch_norm(const Tensor& input, BatchNormState& state);
Tensor swish(const Tensor& x);
Tensor squeeze_excite(const Tensor& input, const SqueezeExciteParams& p);
Tensor global_avg_pool(const Tensor& input);
Tensor softmax(const Tensor& logits);

}  // namespace ctnet::nn
