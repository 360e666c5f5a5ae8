#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ctnet/network.hpp"

// Compound model scaling: depth, width and input resolution grow together as
// alpha^phi, beta^phi and gamma^phi under alpha * beta^2 * gamma^2 ~= 2.
namespace ctnet::scaling {

struct StageSpec {
  std::size_t repeats = 1;
  std::size_t channels = 16;  // output channels of every block in the stage
  std::size_t kernel = 3;
  std::size_t stride = 1;  // first block only; later repeats use stride 1
  double expansion = 1.0;
  double se_ratio = 0.25;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct BaseArchitecture {
  std::string name = "custom";
  std::size_t input_channels = 1;
  std::size_t resolution = 32;
  std::size_t classes = 3;
  std::size_t stem_channels = 16;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 2;
  std::vector<StageSpec> stages;
  std::size_t head_channels = 128;
  double dropout = 0.0;

  // Structural checks; require_divisible additionally demands that the
  // resolution be divisible by the product of the stem and stage strides.
  void validate(bool require_divisible = true) const;

  friend bool operator==(const BaseArchitecture&, const BaseArchitecture&) = default;
};

// The shipped CPU-sized base: 3x3/2 stem with 16 channels, three MBConv stages
// (repeats 1/2/2, channels 16/24/40, strides 1/2/2, expansion 1/6/6, SE 0.25),
// a 128-channel head and 32x32 input.
BaseArchitecture toy_b0(std::size_t classes = 3);

struct ScalingCoefficients {
  double alpha = 1.2;
  double beta = 1.1;
  double gamma = 1.15;
  double phi = 1.0;

  friend bool operator==(const ScalingCoefficients&, const ScalingCoefficients&) = default;
};

struct ScalingOptions {
  double tolerance = 0.2;  // error when |alpha*beta^2*gamma^2 - 2| exceeds this
  double warn_tolerance = 0.1;
};

// alpha * beta^2 * gamma^2
double constraint_value(const ScalingCoefficients& c);

struct ScaledModelPlan {
  BaseArchitecture architecture;  // already scaled
  ScalingCoefficients coefficients{1.0, 1.0, 1.0, 0.0};
  double depth_mult = 1.0;
  double width_mult = 1.0;
  double resolution_mult = 1.0;
  std::vector<std::string> warnings;  // not serialized
};

// Plan that leaves the base untouched.
ScaledModelPlan identity_plan(const BaseArchitecture& base);

// repeats' = ceil(d * repeats); channels' = nearest multiple of 8 of w * channels
// (bases below 8 channels stay as they are, scaled values never drop under 8);
// resolution' = nearest even integer to r * resolution. A multiplier of
// exactly 1 leaves its quantity unchanged.
ScaledModelPlan compound_scale(const BaseArchitecture& base, const ScalingCoefficients& c,
                               const ScalingOptions& options = {});

std::size_t round_channels(double scaled, std::size_t base);
std::size_t round_resolution(double scaled);

// Text form. Architecture keys live in the global section, stages in
// [stage.1], [stage.2], ... and scaling metadata in an optional [scaling]
// section. Printing then parsing is lossless.
std::string print_architecture(const BaseArchitecture& arch);
std::string print_plan(const ScaledModelPlan& plan);
BaseArchitecture parse_architecture(std::string_view text);
ScaledModelPlan parse_plan(std::string_view text);
// "toy-b0" names the built-in base; anything else is read as a file.
ScaledModelPlan load_plan(const std::string& path_or_builtin, std::size_t classes = 3);

// Parameter count includes batch-norm running statistics. MACs are summed
// over convolution, depthwise and dense layers as output positions times
// per-position kernel multiply-accumulates.
struct Cost {
  std::size_t params = 0;
  std::size_t macs = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  friend bool operator==(const Cost&, const Cost&) = default;
};

Cost conv_cost(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, bool bias, std::size_t out_h,
               std::size_t out_w);
Cost depthwise_cost(std::size_t channels, std::size_t kernel, std::size_t out_h, std::size_t out_w);
Cost dense_cost(std::size_t in, std::size_t out, bool bias);
Cost batch_norm_cost(std::size_t channels);
Cost squeeze_excite_cost(std::size_t channels, std::size_t squeezed);
Cost mbconv_cost(const nn::MBConvConfig& cfg, std::size_t in_h, std::size_t in_w);

Cost count_params_flops(const ScaledModelPlan& plan);

// Layer names: input, stem_conv, stem_bn, stem_act, block<stage><letter>_*,
// top_conv, top_bn, top_act, avg_pool, [top_dropout], logits, probs.
nn::Network build_network(const ScaledModelPlan& plan, std::uint64_t seed);
// Network described by a checkpoint's architecture text, holding its weights.
nn::Network network_from_checkpoint(const nn::Checkpoint& ckpt);

// Block configurations in build order with their input resolution.
struct BlockLayout {
  std::string prefix;
  nn::MBConvConfig config;
  std::size_t in_h = 0, in_w = 0;
};
std::vector<BlockLayout> block_layout(const BaseArchitecture& arch);

}  // namespace ctnet::scaling
