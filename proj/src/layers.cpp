#include "ctnet/layers.hpp"

#include <cmath>

#include "ctnet/error.hpp"

namespace ctnet::nn {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_conv: return "depthwise_conv";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::activation: return "activation";
    case LayerKind::squeeze_excite: return "squeeze_excite";
    case LayerKind::pool: return "pool";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
    case LayerKind::add: return "add";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Context

ad::Var Context::bind(Parameter& p) {
  if (auto it = param_overrides_.find(&p); it != param_overrides_.end()) return it->second;
  if (auto it = bound_index_.find(&p); it != bound_index_.end()) return bindings_[it->second].second;
  ad::Var v = (track_parameters_ && p.trainable) ? tape_.variable(p.value) : tape_.constant(p.value);
  bound_index_[&p] = bindings_.size();
  bindings_.emplace_back(&p, v);
  return v;
}

ad::Var Context::emit(const std::string& name, LayerKind kind, ad::Var out) {
  if (auto it = output_overrides_.find(name); it != output_overrides_.end()) {
    if (it->second.shape() != out.shape()) {
      throw DimensionError("override for layer '" + name + "' has shape " + shape_string(it->second.shape()) +
                           ", layer produces " + shape_string(out.shape()));
    }
    out = tape_.constant(it->second);
  }
  if (watched_.count(name)) out = tape_.variable(out.value());
  outputs_.push_back(RecordedOutput{name, kind, out});
  return out;
}

// ---------------------------------------------------------------------------
// Initializers

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = sigma * z;
  }
  return t;
}

Tensor glorot_uniform(std::size_t in, std::size_t out, Rng& rng) {
  Tensor t({in, out});
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

void check_positive(std::size_t v, const char* what, const std::string& layer) {
  if (v == 0) throw ConfigError(layer + ": " + what + " must be positive");
}

}  // namespace

// ---------------------------------------------------------------------------
// Layers

ad::Var InputLayer::forward(Context& ctx, ad::Var x) { return ctx.emit(name(), kind(), x); }

Conv2D::Conv2D(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
               Padding padding, bool use_bias, Rng& rng)
    : Layer(name), stride_(stride), padding_(padding) {
  check_positive(in_ch, "input channels", name);
  check_positive(out_ch, "output channels", name);
  check_positive(kernel, "kernel size", name);
  check_positive(stride, "stride", name);
  if (padding == Padding::same && kernel % 2 == 0) throw ConfigError(name + ": same padding needs an odd kernel");
  weights_ = Parameter{name + "/kernel", he_normal({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng)};
  if (use_bias) bias_ = Parameter{name + "/bias", Tensor({out_ch}, 0.0)};
}

ad::Var Conv2D::forward(Context& ctx, ad::Var x) {
  ad::Var b = bias_ ? ctx.bind(*bias_) : ad::Var{};
  return ctx.emit(name(), kind(), ad::conv2d(x, ctx.bind(weights_), b, stride_, padding_));
}

void Conv2D::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weights_);
  if (bias_) out.push_back(&*bias_);
}

DepthwiseConv2D::DepthwiseConv2D(std::string name, std::size_t channels, std::size_t kernel, std::size_t stride,
                                 Padding padding, Rng& rng)
    : Layer(name), stride_(stride), padding_(padding) {
  check_positive(channels, "channels", name);
  check_positive(kernel, "kernel size", name);
  check_positive(stride, "stride", name);
  if (padding == Padding::same && kernel % 2 == 0) throw ConfigError(name + ": same padding needs an odd kernel");
  weights_ = Parameter{name + "/depthwise_kernel", he_normal({channels, 1, kernel, kernel}, kernel * kernel, rng)};
}

ad::Var DepthwiseConv2D::forward(Context& ctx, ad::Var x) {
  return ctx.emit(name(), kind(), ad::depthwise_conv2d(x, ctx.bind(weights_), stride_, padding_));
}

void DepthwiseConv2D::collect_parameters(std::vector<Parameter*>& out) { out.push_back(&weights_); }

BatchNorm::BatchNorm(std::string name, std::size_t channels, double momentum, double epsilon)
    : Layer(name),
      gamma_{name + "/gamma", Tensor({channels}, 1.0)},
      beta_{name + "/beta", Tensor({channels}, 0.0)},
      running_mean_{name + "/moving_mean", Tensor({channels}, 0.0), false},
      running_var_{name + "/moving_variance", Tensor({channels}, 1.0), false},
      momentum_(momentum),
      epsilon_(epsilon) {
  if (!(momentum > 0 && momentum < 1)) throw ConfigError(name + ": momentum must lie in (0, 1)");
  if (!(epsilon > 0)) throw ConfigError(name + ": epsilon must be positive");
}

ad::Var BatchNorm::forward(Context& ctx, ad::Var x) {
  ad::Var gamma = ctx.bind(gamma_);
  ad::Var beta = ctx.bind(beta_);
  if (ctx.mode() == Mode::infer) {
    return ctx.emit(name(), kind(),
                    ad::batch_norm_infer(x, gamma, beta, running_mean_.value, running_var_.value, epsilon_));
  }
  ad::BatchStats stats;
  ad::Var y = ad::batch_norm_train(x, gamma, beta, epsilon_, &stats);
  const double m = ctx.statistics_momentum().value_or(momentum_);
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    running_mean_.value[c] = m * running_mean_.value[c] + (1 - m) * stats.mean[c];
    running_var_.value[c] = m * running_var_.value[c] + (1 - m) * stats.variance[c];
  }
  return ctx.emit(name(), kind(), y);
}

void BatchNorm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

ad::Var ActivationLayer::forward(Context& ctx, ad::Var x) {
  switch (fn_) {
    case Activation::swish: return ctx.emit(name(), kind(), ad::swish(x));
    case Activation::relu: return ctx.emit(name(), kind(), ad::relu(x));
    case Activation::sigmoid: return ctx.emit(name(), kind(), ad::sigmoid(x));
  }
  throw std::logic_error("unknown activation");
}

Dense::Dense(std::string name, std::size_t in, std::size_t out, bool use_bias, Rng& rng) : Layer(name) {
  check_positive(in, "input width", name);
  check_positive(out, "output width", name);
  weights_ = Parameter{name + "/kernel", glorot_uniform(in, out, rng)};
  if (use_bias) bias_ = Parameter{name + "/bias", Tensor({out}, 0.0)};
}

ad::Var Dense::forward(Context& ctx, ad::Var x) {
  ad::Var b = bias_ ? ctx.bind(*bias_) : ad::Var{};
  return ctx.emit(name(), kind(), ad::linear(x, ctx.bind(weights_), b));
}

void Dense::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weights_);
  if (bias_) out.push_back(&*bias_);
}

SqueezeExcite::SqueezeExcite(std::string name, std::size_t channels, std::size_t squeezed, Rng& rng)
    : Layer(name),
      reduce_(name + "_reduce", channels, squeezed, true, rng),
      expand_(name + "_expand", squeezed, channels, true, rng) {}

ad::Var SqueezeExcite::forward(Context& ctx, ad::Var x) {
  ad::Var pooled = ad::global_avg_pool(x);
  ad::Var hidden = ad::swish(ad::linear(pooled, ctx.bind(reduce_.weights()), ctx.bind(*reduce_.bias())));
  ad::Var gate = ad::sigmoid(ad::linear(hidden, ctx.bind(expand_.weights()), ctx.bind(*expand_.bias())));
  return ctx.emit(name(), kind(), ad::scale_channels(x, gate));
}

void SqueezeExcite::collect_parameters(std::vector<Parameter*>& out) {
  reduce_.collect_parameters(out);
  expand_.collect_parameters(out);
}

ad::Var GlobalAvgPool::forward(Context& ctx, ad::Var x) {
  return ctx.emit(name(), kind(), ad::global_avg_pool(x));
}

Dropout::Dropout(std::string name, double rate) : Layer(name), rate_(rate) {
  if (!(rate >= 0 && rate < 1)) throw ConfigError(this->name() + ": dropout rate must lie in [0, 1)");
}

ad::Var Dropout::forward(Context& ctx, ad::Var x) {
  if (ctx.mode() == Mode::infer || rate_ == 0) return ctx.emit(name(), kind(), x);
  Rng rng(Rng::derive(ctx.dropout_seed(), {hash_string(name())}));
  Tensor mask(x.shape());
  const double keep = 1.0 - rate_;
  for (auto& m : mask.data()) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return ctx.emit(name(), kind(), ad::apply_mask(x, mask));
}

ad::Var Softmax::forward(Context& ctx, ad::Var x) { return ctx.emit(name(), kind(), ad::softmax(x)); }

// ---------------------------------------------------------------------------
// MBConv

std::size_t MBConvConfig::expanded_channels() const {
  return static_cast<std::size_t>(std::ceil(expansion * static_cast<double>(in_ch) - 1e-9));
}

std::size_t MBConvConfig::squeezed_channels() const {
  if (se_ratio <= 0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(se_ratio * static_cast<double>(in_ch) - 1e-9)));
}

void MBConvConfig::validate() const {
  if (stride != 1 && stride != 2) throw ConfigError("MBConv stride must be 1 or 2, got " + std::to_string(stride));
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("MBConv kernel must be odd, got " + std::to_string(kernel));
  if (in_ch == 0 || out_ch == 0) throw ConfigError("MBConv channel counts must be positive");
  if (!(expansion > 0)) throw ConfigError("MBConv expansion must be positive");
  if (!(se_ratio >= 0 && se_ratio <= 1)) throw ConfigError("MBConv se_ratio must lie in [0, 1]");
}

namespace {

const MBConvConfig& validated(const MBConvConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

MBConvBlock::MBConvBlock(std::string prefix, const MBConvConfig& cfg, Rng& rng)
    : Layer(prefix),
      cfg_(validated(cfg)),
      expand_conv_(cfg.expansion != 1.0 ? std::make_unique<Conv2D>(prefix + "_expand_conv", cfg.in_ch,
                                                                   cfg.expanded_channels(), 1, 1, Padding::same,
                                                                   false, rng)
                                        : nullptr),
      expand_bn_(expand_conv_ ? std::make_unique<BatchNorm>(prefix + "_expand_bn", cfg.expanded_channels()) : nullptr),
      expand_act_(expand_conv_ ? std::make_unique<ActivationLayer>(prefix + "_expand_act", Activation::swish)
                               : nullptr),
      dwconv_(prefix + "_dwconv", expand_conv_ ? cfg.expanded_channels() : cfg.in_ch, cfg.kernel, cfg.stride,
              Padding::same, rng),
      bn_(prefix + "_bn", expand_conv_ ? cfg.expanded_channels() : cfg.in_ch),
      act_(prefix + "_act", Activation::swish),
      se_(cfg.squeezed_channels() > 0
              ? std::make_unique<SqueezeExcite>(prefix + "_se", expand_conv_ ? cfg.expanded_channels() : cfg.in_ch,
                                                cfg.squeezed_channels(), rng)
              : nullptr),
      project_conv_(prefix + "_project_conv", expand_conv_ ? cfg.expanded_channels() : cfg.in_ch, cfg.out_ch, 1, 1,
                    Padding::same, false, rng),
      project_bn_(prefix + "_project_bn", cfg.out_ch) {}

LayerKind MBConvBlock::kind() const { return cfg_.has_skip() ? LayerKind::add : LayerKind::batch_norm; }

ad::Var MBConvBlock::forward(Context& ctx, ad::Var x) {
  if (x.value().rank() != 4 || x.value().dim(1) != cfg_.in_ch) {
    throw DimensionError(name() + ": expected " + std::to_string(cfg_.in_ch) + " input channels, got shape " +
                         shape_string(x.shape()));
  }
  ad::Var h = x;
  if (expand_conv_) {
    h = expand_conv_->forward(ctx, h);
    h = expand_bn_->forward(ctx, h);
    h = expand_act_->forward(ctx, h);
  }
  h = dwconv_.forward(ctx, h);
  h = bn_.forward(ctx, h);
  h = act_.forward(ctx, h);
  if (se_) h = se_->forward(ctx, h);
  h = project_conv_.forward(ctx, h);
  h = project_bn_.forward(ctx, h);
  if (cfg_.has_skip()) h = ctx.emit(name() + "_add", LayerKind::add, ad::add(h, x));
  return h;
}

void MBConvBlock::collect_parameters(std::vector<Parameter*>& out) {
  if (expand_conv_) {
    expand_conv_->collect_parameters(out);
    expand_bn_->collect_parameters(out);
  }
  dwconv_.collect_parameters(out);
  bn_.collect_parameters(out);
  if (se_) se_->collect_parameters(out);
  project_conv_.collect_parameters(out);
  project_bn_.collect_parameters(out);
}

std::vector<std::string> MBConvBlock::recorded_names() const {
  std::vector<std::string> names;
  if (expand_conv_) {
    names.push_back(expand_conv_->name());
    names.push_back(expand_bn_->name());
    names.push_back(expand_act_->name());
  }
  names.push_back(dwconv_.name());
  names.push_back(bn_.name());
  names.push_back(act_.name());
  if (se_) names.push_back(se_->name());
  names.push_back(project_conv_.name());
  names.push_back(project_bn_.name());
  if (cfg_.has_skip()) names.push_back(name() + "_add");
  return names;
}

// ---------------------------------------------------------------------------
// Stand-alone functions

BatchNormState BatchNormState::identity(std::size_t channels) {
  return BatchNormState{Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 0.0),
                        Tensor({channels}, 1.0)};
}

Tensor conv2d(const Tensor& input, const ConvParams& p) {
  ad::Tape t;
  ad::Var b = p.bias ? t.constant(*p.bias) : ad::Var{};
  return ad::conv2d(t.constant(input), t.constant(p.weights), b, p.stride, p.padding).value();
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, Padding padding) {
  ad::Tape t;
  return ad::depthwise_conv2d(t.constant(input), t.constant(kernels), stride, padding).value();
}

Tensor batch_norm(const Tensor& input, BatchNormState& state) {
  ad::Tape t;
  ad::Var x = t.constant(input);
  ad::Var gamma = t.constant(state.gamma);
  ad::Var beta = t.constant(state.beta);
  if (state.mode == Mode::infer) {
    return ad::batch_norm_infer(x, gamma, beta, state.running_mean, state.running_var, state.epsilon).value();
  }
  ad::BatchStats stats;
  Tensor y = ad::batch_norm_train(x, gamma, beta, state.epsilon, &stats).value();
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    state.running_mean[c] = state.momentum * state.running_mean[c] + (1 - state.momentum) * stats.mean[c];
    state.running_var[c] = state.momentum * state.running_var[c] + (1 - state.momentum) * stats.variance[c];
  }
  return y;
}

Tensor swish(const Tensor& x) {
  ad::Tape t;
  return ad::swish(t.constant(x)).value();
}

Tensor squeeze_excite(const Tensor& input, const SqueezeExciteParams& p) {
  ad::Tape t;
  ad::Var x = t.constant(input);
  ad::Var hidden = ad::swish(ad::linear(ad::global_avg_pool(x), t.constant(p.reduce_w), t.constant(p.reduce_b)));
  ad::Var gate = ad::sigmoid(ad::linear(hidden, t.constant(p.expand_w), t.constant(p.expand_b)));
  return ad::scale_channels(x, gate).value();
}

Tensor global_avg_pool(const Tensor& input) {
  ad::Tape t;
  return ad::global_avg_pool(t.constant(input)).value();
}

Tensor softmax(const Tensor& logits) {
  ad::Tape t;
  return ad::softmax(t.constant(logits)).value();
}

}  // namespace ctnet::nn
