#include "ctnet/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ctnet/config.hpp"
#include "ctnet/error.hpp"

namespace ctnet::scaling {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::string block_prefix(std::size_t stage, std::size_t index) {
  std::string p = "block" + std::to_string(stage);
  if (index < 26) return p + static_cast<char>('a' + index);
  return p + "_" + std::to_string(index);
}

}  // namespace

void BaseArchitecture::validate(bool require_divisible) const {
  if (input_channels == 0 || resolution == 0 || classes == 0) {
    throw ConfigError("architecture '" + name + "': input_channels, resolution and classes must be positive");
  }
  if (stem_channels == 0 || stem_kernel % 2 == 0 || stem_stride == 0) {
    throw ConfigError("architecture '" + name + "': invalid stem (channels > 0, odd kernel, stride > 0)");
  }
  if (head_channels == 0) throw ConfigError("architecture '" + name + "': head_channels must be positive");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("architecture '" + name + "': dropout must lie in [0, 1)");
  if (stages.empty()) throw ConfigError("architecture '" + name + "': at least one stage required");
  std::size_t total_stride = stem_stride;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "architecture '" + name + "' stage " + std::to_string(i + 1) + ": ";
    if (s.repeats < 1) throw ConfigError(where + "repeats must be >= 1");
    nn::MBConvConfig cfg{s.expansion, s.kernel, s.stride, s.channels, s.channels, s.se_ratio};
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
    total_stride *= s.stride;
  }
  if (require_divisible && resolution % total_stride != 0) {
    throw ConfigError("architecture '" + name + "': resolution " + std::to_string(resolution) +
                      " is not divisible by the total stride " + std::to_string(total_stride));
  }
}

BaseArchitecture toy_b0(std::size_t classes) {
  BaseArchitecture a;
  a.name = "toy-b0";
  a.input_channels = 1;
  a.resolution = 32;
  a.classes = classes;
  a.stem_channels = 16;
  a.stem_kernel = 3;
  a.stem_stride = 2;
  a.stages = {
      StageSpec{1, 16, 3, 1, 1.0, 0.25},
      StageSpec{2, 24, 3, 2, 6.0, 0.25},
      StageSpec{2, 40, 3, 2, 6.0, 0.25},
  };
  a.head_channels = 128;
  a.dropout = 0.0;
  return a;
}

double constraint_value(const ScalingCoefficients& c) { return c.alpha * c.beta * c.beta * c.gamma * c.gamma; }

ScaledModelPlan identity_plan(const BaseArchitecture& base) {
  ScaledModelPlan p;
  p.architecture = base;
  return p;
}

std::size_t round_channels(double scaled, std::size_t base) {
  if (base < 8) return base;
  const double r = std::floor(scaled / 8.0 + 0.5) * 8.0;
  return std::max<std::size_t>(8, static_cast<std::size_t>(r));
}

std::size_t round_resolution(double scaled) {
  const double r = std::floor(scaled / 2.0 + 0.5) * 2.0;
  return std::max<std::size_t>(2, static_cast<std::size_t>(r));
}

ScaledModelPlan compound_scale(const BaseArchitecture& base, const ScalingCoefficients& c,
                               const ScalingOptions& options) {
  base.validate(true);
  if (!(c.alpha >= 1 && c.beta >= 1 && c.gamma >= 1)) {
    throw ConfigError("scaling coefficients alpha, beta, gamma must be >= 1");
  }
  if (!(c.phi >= 0)) throw ConfigError("scaling exponent phi must be >= 0");
  const double cv = constraint_value(c);
  const double deviation = std::abs(cv - 2.0);
  if (deviation > options.tolerance) {
    throw ConfigError("scaling constraint violated: alpha*beta^2*gamma^2 = " + format_real(cv) +
                      ", expected 2 +/- " + format_real(options.tolerance));
  }

  ScaledModelPlan plan;
  plan.coefficients = c;
  if (deviation > options.warn_tolerance) {
    plan.warnings.push_back("alpha*beta^2*gamma^2 = " + format_real(cv) + " deviates from 2 by more than " +
                            format_real(options.warn_tolerance));
  }
  plan.depth_mult = std::pow(c.alpha, c.phi);
  plan.width_mult = std::pow(c.beta, c.phi);
  plan.resolution_mult = std::pow(c.gamma, c.phi);

  const double d = plan.depth_mult, w = plan.width_mult, r = plan.resolution_mult;
  auto width = [w](std::size_t ch) { return w == 1.0 ? ch : round_channels(w * static_cast<double>(ch), ch); };

  BaseArchitecture a = base;
  for (auto& s : a.stages) {
    if (d != 1.0) s.repeats = static_cast<std::size_t>(std::ceil(d * static_cast<double>(s.repeats) - 1e-9));
    s.channels = width(s.channels);
  }
  a.stem_channels = width(a.stem_channels);
  a.head_channels = width(a.head_channels);
  if (r != 1.0) a.resolution = round_resolution(r * static_cast<double>(base.resolution));
  plan.architecture = std::move(a);
  return plan;
}

// ---------------------------------------------------------------------------
// Text form

std::string print_architecture(const BaseArchitecture& arch) {
  ConfigDocument doc;
  auto& g = doc.global();
  g.set("name", arch.name);
  g.set("input_channels", std::to_string(arch.input_channels));
  g.set("resolution", std::to_string(arch.resolution));
  g.set("classes", std::to_string(arch.classes));
  g.set("stem_channels", std::to_string(arch.stem_channels));
  g.set("stem_kernel", std::to_string(arch.stem_kernel));
  g.set("stem_stride", std::to_string(arch.stem_stride));
  g.set("head_channels", std::to_string(arch.head_channels));
  g.set("dropout", format_real(arch.dropout));
  for (std::size_t i = 0; i < arch.stages.size(); ++i) {
    const auto& s = arch.stages[i];
    auto& sec = doc.section("stage." + std::to_string(i + 1));
    sec.set("repeats", std::to_string(s.repeats));
    sec.set("channels", std::to_string(s.channels));
    sec.set("kernel", std::to_string(s.kernel));
    sec.set("stride", std::to_string(s.stride));
    sec.set("expansion", format_real(s.expansion));
    sec.set("se_ratio", format_real(s.se_ratio));
  }
  return doc.print();
}

std::string print_plan(const ScaledModelPlan& plan) {
  std::string text = print_architecture(plan.architecture);
  ConfigDocument doc;
  auto& s = doc.section("scaling");
  s.set("alpha", format_real(plan.coefficients.alpha));
  s.set("beta", format_real(plan.coefficients.beta));
  s.set("gamma", format_real(plan.coefficients.gamma));
  s.set("phi", format_real(plan.coefficients.phi));
  s.set("depth_mult", format_real(plan.depth_mult));
  s.set("width_mult", format_real(plan.width_mult));
  s.set("resolution_mult", format_real(plan.resolution_mult));
  return text + "\n" + doc.print();
}

namespace {

class Reader {
 public:
  explicit Reader(const ConfigSection& s, std::string where) : s_(s), where_(std::move(where)) {}

  const std::string* raw(const char* key) {
    used_.push_back(key);
    return s_.find(key);
  }
  std::size_t count(const char* key, std::size_t fallback) {
    const auto* v = raw(key);
    return v ? parse_count(*v, where_ + "." + key) : fallback;
  }
  double real(const char* key, double fallback) {
    const auto* v = raw(key);
    return v ? parse_real(*v, where_ + "." + key) : fallback;
  }
  std::size_t required_count(const char* key) {
    const auto* v = raw(key);
    if (!v) throw ConfigError(where_ + ": missing key '" + key + "'");
    return parse_count(*v, where_ + "." + key);
  }
  double required_real(const char* key) {
    const auto* v = raw(key);
    if (!v) throw ConfigError(where_ + ": missing key '" + key + "'");
    return parse_real(*v, where_ + "." + key);
  }
  void reject_unknown() const {
    for (const auto& [k, v] : s_.entries) {
      if (std::find(used_.begin(), used_.end(), k) == used_.end()) {
        throw ConfigError(where_ + ": unknown key '" + k + "'");
      }
    }
  }

 private:
  const ConfigSection& s_;
  std::string where_;
  std::vector<std::string> used_;
};

BaseArchitecture parse_architecture_doc(const ConfigDocument& doc) {
  BaseArchitecture a;
  Reader g(doc.global(), "architecture");
  if (const auto* v = g.raw("name")) a.name = *v;
  a.input_channels = g.count("input_channels", a.input_channels);
  a.resolution = g.required_count("resolution");
  a.classes = g.required_count("classes");
  a.stem_channels = g.count("stem_channels", a.stem_channels);
  a.stem_kernel = g.count("stem_kernel", a.stem_kernel);
  a.stem_stride = g.count("stem_stride", a.stem_stride);
  a.head_channels = g.count("head_channels", a.head_channels);
  a.dropout = g.real("dropout", a.dropout);
  g.reject_unknown();

  for (const auto& sec : doc.sections()) {
    if (sec.name.empty() || sec.name == "scaling") continue;
    const std::string expected = "stage." + std::to_string(a.stages.size() + 1);
    if (sec.name != expected) {
      throw ConfigError("unexpected section [" + sec.name + "], expected [" + expected + "]");
    }
    Reader r(sec, sec.name);
    StageSpec s;
    s.repeats = r.required_count("repeats");
    s.channels = r.required_count("channels");
    s.kernel = r.count("kernel", s.kernel);
    s.stride = r.count("stride", s.stride);
    s.expansion = r.real("expansion", s.expansion);
    s.se_ratio = r.real("se_ratio", s.se_ratio);
    r.reject_unknown();
    a.stages.push_back(s);
  }
  return a;
}

}  // namespace

BaseArchitecture parse_architecture(std::string_view text) {
  BaseArchitecture a = parse_architecture_doc(ConfigDocument::parse(text));
  a.validate(true);
  return a;
}

ScaledModelPlan parse_plan(std::string_view text) {
  const ConfigDocument doc = ConfigDocument::parse(text);
  ScaledModelPlan plan;
  plan.architecture = parse_architecture_doc(doc);
  const ConfigSection* sc = doc.find("scaling");
  plan.architecture.validate(sc == nullptr);
  if (sc) {
    Reader r(*sc, "scaling");
    plan.coefficients.alpha = r.required_real("alpha");
    plan.coefficients.beta = r.required_real("beta");
    plan.coefficients.gamma = r.required_real("gamma");
    plan.coefficients.phi = r.required_real("phi");
    plan.depth_mult = r.real("depth_mult", std::pow(plan.coefficients.alpha, plan.coefficients.phi));
    plan.width_mult = r.real("width_mult", std::pow(plan.coefficients.beta, plan.coefficients.phi));
    plan.resolution_mult = r.real("resolution_mult", std::pow(plan.coefficients.gamma, plan.coefficients.phi));
    r.reject_unknown();
  }
  return plan;
}

ScaledModelPlan load_plan(const std::string& path_or_builtin, std::size_t classes) {
  if (path_or_builtin == "toy-b0") return identity_plan(toy_b0(classes));
  std::ifstream in(path_or_builtin);
  if (!in) throw ConfigError("cannot open architecture file '" + path_or_builtin + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str());
}

// ---------------------------------------------------------------------------
// Accounting

Cost conv_cost(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, bool bias, std::size_t out_h,
               std::size_t out_w) {
  const std::size_t per_position = kernel * kernel * in_ch * out_ch;
  return Cost{per_position + (bias ? out_ch : 0), out_h * out_w * per_position};
}

Cost depthwise_cost(std::size_t channels, std::size_t kernel, std::size_t out_h, std::size_t out_w) {
  const std::size_t per_position = kernel * kernel * channels;
  return Cost{per_position, out_h * out_w * per_position};
}

Cost dense_cost(std::size_t in, std::size_t out, bool bias) { return Cost{in * out + (bias ? out : 0), in * out}; }

Cost batch_norm_cost(std::size_t channels) { return Cost{4 * channels, 0}; }

Cost squeeze_excite_cost(std::size_t channels, std::size_t squeezed) {
  Cost c = dense_cost(channels, squeezed, true);
  c += dense_cost(squeezed, channels, true);
  return c;
}

Cost mbconv_cost(const nn::MBConvConfig& cfg, std::size_t in_h, std::size_t in_w) {
  cfg.validate();
  Cost total;
  std::size_t ch = cfg.in_ch;
  if (cfg.expansion != 1.0) {
    ch = cfg.expanded_channels();
    total += conv_cost(cfg.in_ch, ch, 1, false, in_h, in_w);
    total += batch_norm_cost(ch);
  }
  const std::size_t oh = ceil_div(in_h, cfg.stride), ow = ceil_div(in_w, cfg.stride);
  total += depthwise_cost(ch, cfg.kernel, oh, ow);
  total += batch_norm_cost(ch);
  if (cfg.squeezed_channels() > 0) total += squeeze_excite_cost(ch, cfg.squeezed_channels());
  total += conv_cost(ch, cfg.out_ch, 1, false, oh, ow);
  total += batch_norm_cost(cfg.out_ch);
  return total;
}

std::vector<BlockLayout> block_layout(const BaseArchitecture& arch) {
  std::vector<BlockLayout> out;
  std::size_t h = ceil_div(arch.resolution, arch.stem_stride);
  std::size_t ch = arch.stem_channels;
  for (std::size_t s = 0; s < arch.stages.size(); ++s) {
    const auto& st = arch.stages[s];
    for (std::size_t i = 0; i < st.repeats; ++i) {
      nn::MBConvConfig cfg{st.expansion, st.kernel, i == 0 ? st.stride : 1, ch, st.channels, st.se_ratio};
      out.push_back(BlockLayout{block_prefix(s + 1, i), cfg, h, h});
      h = ceil_div(h, cfg.stride);
      ch = st.channels;
    }
  }
  return out;
}

Cost count_params_flops(const ScaledModelPlan& plan) {
  const auto& a = plan.architecture;
  Cost total;
  const std::size_t sh = ceil_div(a.resolution, a.stem_stride);
  total += conv_cost(a.input_channels, a.stem_channels, a.stem_kernel, false, sh, sh);
  total += batch_norm_cost(a.stem_channels);
  std::size_t h = sh, ch = a.stem_channels;
  for (const auto& b : block_layout(a)) {
    total += mbconv_cost(b.config, b.in_h, b.in_w);
    h = ceil_div(b.in_h, b.config.stride);
    ch = b.config.out_ch;
  }
  total += conv_cost(ch, a.head_channels, 1, false, h, h);
  total += batch_norm_cost(a.head_channels);
  total += dense_cost(a.head_channels, a.classes, true);
  return total;
}

nn::Network build_network(const ScaledModelPlan& plan, std::uint64_t seed) {
  const auto& a = plan.architecture;
  a.validate(false);
  Rng rng(seed);
  nn::Network net(a.classes, a.input_channels, a.resolution);
  net.set_description(print_plan(plan));
  net.add(std::make_unique<nn::InputLayer>("input"));
  net.add(std::make_unique<nn::Conv2D>("stem_conv", a.input_channels, a.stem_channels, a.stem_kernel, a.stem_stride,
                                       nn::Padding::same, false, rng));
  net.add(std::make_unique<nn::BatchNorm>("stem_bn", a.stem_channels));
  net.add(std::make_unique<nn::ActivationLayer>("stem_act", nn::Activation::swish));
  std::size_t ch = a.stem_channels;
  for (const auto& b : block_layout(a)) {
    net.add(std::make_unique<nn::MBConvBlock>(b.prefix, b.config, rng));
    ch = b.config.out_ch;
  }
  net.add(std::make_unique<nn::Conv2D>("top_conv", ch, a.head_channels, 1, 1, nn::Padding::same, false, rng));
  net.add(std::make_unique<nn::BatchNorm>("top_bn", a.head_channels));
  net.add(std::make_unique<nn::ActivationLayer>("top_act", nn::Activation::swish));
  net.add(std::make_unique<nn::GlobalAvgPool>("avg_pool"));
  if (a.dropout > 0) net.add(std::make_unique<nn::Dropout>("top_dropout", a.dropout));
  net.add(std::make_unique<nn::Dense>(nn::Network::kLogitsLayer, a.head_channels, a.classes, true, rng));
  net.add(std::make_unique<nn::Softmax>("probs"));
  return net;
}

nn::Network network_from_checkpoint(const nn::Checkpoint& ckpt) {
  auto net = build_network(parse_plan(ckpt.description), 0);
  nn::restore(net, ckpt);
  return net;
}

}  // namespace ctnet::scaling
