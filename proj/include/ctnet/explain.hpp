#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "ctnet/network.hpp"

// Saliency and activation inspection for trained networks.
namespace ctnet::explain {

// Y^c: the pre-softmax logit (default) or the softmax probability.
enum class TargetScore { logit, probability };

struct GradCamOptions {
  std::string layer;  // empty: the last convolution layer
  TargetScore score = TargetScore::logit;
};

struct Heatmap {
  Tensor raw;         // [h,w], ReLU(sum_k w_k A^k) at the layer's resolution
  Tensor normalized;  // raw / max(raw), or zeros when max is 0
  Tensor upsampled;   // normalized, bilinear to the input resolution [H,W]
  std::vector<double> weights;  // w_k = mean over (i,j) of dY^c/dA^k_ij
  std::size_t target_class = 0;
  std::string layer;
};

// Layers with a [N,C,h,w] output, in execution order.
std::vector<std::string> spatial_layers(nn::Network& net);
std::string default_gradcam_layer(nn::Network& net);

// input is one [C,H,W] image already in network units (rescaled).
Heatmap gradcam(nn::Network& net, const Tensor& input, std::size_t target_class, const GradCamOptions& options = {});

// dY^c/dA for the named layer of a single-image forward pass ([C,h,w]).
Tensor score_gradient(nn::Network& net, const Tensor& input, std::size_t target_class, const std::string& layer,
                      TargetScore score = TargetScore::logit);
// Y^c with the named layer's output replaced by a.
double score_with_activation(nn::Network& net, const Tensor& input, std::size_t target_class,
                             const std::string& layer, const Tensor& a, TargetScore score = TargetScore::logit);

// ReLU(sum_k w_k maps[k]) for maps [K,h,w].
Tensor weight_combine(const std::vector<double>& weights, const Tensor& maps);

struct MaskStats {
  double mean = 0.0;
  double sd = 0.0;  // population
  double threshold = 0.0;  // mean + sd
  std::vector<std::size_t> mask;  // flat indices strictly above threshold
  double mask_mean = 0.0;  // 0 when the mask is empty
  bool empty = true;
};

MaskStats mask_stats(const Tensor& map);

struct MaskComparison {
  MaskStats template_stats;
  double template_mean = 0.0;  // over the template's mask
  double other_mean = 0.0;     // same mask applied to the other map
};

MaskComparison mask_compare(const Tensor& template_map, const Tensor& other);

// Mean of values at the given flat indices; 0 when empty.
double masked_mean(const Tensor& map, const std::vector<std::size_t>& mask);

struct LayerDump {
  std::string layer;
  std::size_t filters = 0;
  std::size_t height = 0, width = 0;  // per-filter map extent
  Tensor grid;                         // [1,GH,GW], integers 0..255
};

inline constexpr double kGridSeparator = 255.0;

// Min-max maps one filter to integers 0..255; a constant map gives zeros.
Tensor normalize_to_byte(const Tensor& map);
// Tiles [F,h,w] maps row-major, ceil(sqrt(F)) per row, 1-pixel separators.
Tensor tile_grid(const Tensor& maps);

// Empty selection: every convolution output.
std::vector<LayerDump> activation_dump(nn::Network& net, const Tensor& input,
                                       const std::vector<std::string>& layers = {});

// Overlay color ramp, low to high: black, blue, cyan, yellow, red.
using Rgb = std::array<unsigned char, 3>;
const std::array<Rgb, 256>& color_ramp();
inline constexpr double kOverlayAlpha = 0.4;

// gray [1,H,W] or [H,W] and heat [H,W] (both 0..255) to [3,H,W]:
// round((1 - alpha) gray + alpha ramp[heat]).
Tensor overlay(const Tensor& gray, const Tensor& heat);
// Rounds a [0,1] map to integers 0..255.
Tensor to_byte_image(const Tensor& unit_map);

}  // namespace ctnet::explain
