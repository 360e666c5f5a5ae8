#include "ctnet/explain.hpp"

#include <algorithm>
#include <cmath>

#include "ctnet/dataset.hpp"
#include "ctnet/error.hpp"

namespace ctnet::explain {

namespace {

Tensor batch_of_one(const nn::Network& net, const Tensor& input) {
  if (input.rank() != 3) throw DimensionError("expected one [C,H,W] image, got " + shape_string(input.shape()));
  Shape s{1};
  s.insert(s.end(), input.shape().begin(), input.shape().end());
  Tensor x = input.reshaped(s);
  net.validate_input(x.shape());
  return x;
}

const nn::RecordedOutput* find_output(const nn::Context& ctx, const std::string& name) {
  for (const auto& o : ctx.outputs())
    if (o.name == name) return &o;
  return nullptr;
}

std::string joined(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

void require_spatial_layer(nn::Network& net, const std::string& layer) {
  const auto valid = spatial_layers(net);
  if (std::find(valid.begin(), valid.end(), layer) == valid.end()) {
    const auto all = net.recorded_names();
    const bool known = std::find(all.begin(), all.end(), layer) != all.end();
    throw ConfigError((known ? "layer '" + layer + "' has no spatial output" : "unknown layer '" + layer + "'") +
                      "; valid layers: " + joined(valid));
  }
}

ad::Var target_score(nn::Context& ctx, ad::Var probs, std::size_t target_class, TargetScore score) {
  ad::Var source = probs;
  if (score == TargetScore::logit) {
    const auto* logits = find_output(ctx, nn::Network::kLogitsLayer);
    if (!logits) throw ConfigError("network has no 'logits' layer");
    source = logits->var;
  }
  const std::size_t k = source.value().dim(1);
  if (target_class >= k) {
    throw DimensionError("class " + std::to_string(target_class) + " out of range for " + std::to_string(k) +
                         " classes");
  }
  Tensor pick(source.shape(), 0.0);
  pick[target_class] = 1.0;
  return ad::sum(ad::mul(source, ctx.tape().constant(std::move(pick))));
}

}  // namespace

std::vector<std::string> spatial_layers(nn::Network& net) {
  ad::Tape tape;
  nn::Context ctx(tape, nn::Mode::infer);
  const std::size_t r = net.resolution();
  net.forward(ctx, tape.constant(Tensor({1, net.input_channels(), r, r}, 0.5)));
  std::vector<std::string> out;
  for (const auto& o : ctx.outputs())
    if (o.var.value().rank() == 4) out.push_back(o.name);
  return out;
}

std::string default_gradcam_layer(nn::Network& net) {
  ad::Tape tape;
  nn::Context ctx(tape, nn::Mode::infer);
  const std::size_t r = net.resolution();
  net.forward(ctx, tape.constant(Tensor({1, net.input_channels(), r, r}, 0.5)));
  std::string last;
  for (const auto& o : ctx.outputs())
    if (o.kind == nn::LayerKind::conv && o.var.value().rank() == 4) last = o.name;
  if (last.empty()) throw ConfigError("network has no convolution layer");
  return last;
}

Tensor score_gradient(nn::Network& net, const Tensor& input, std::size_t target_class, const std::string& layer,
                      TargetScore score) {
  require_spatial_layer(net, layer);
  ad::Tape tape;
  nn::Context ctx(tape, nn::Mode::infer);
  ctx.watch_output(layer);
  const ad::Var probs = net.forward(ctx, tape.constant(batch_of_one(net, input)));
  const ad::Var y = target_score(ctx, probs, target_class, score);
  const auto* a = find_output(ctx, layer);
  const auto grads = ad::backward(tape, y);
  const Tensor g = grads.wrt(a->var);
  return g.reshaped({g.dim(1), g.dim(2), g.dim(3)});
}

double score_with_activation(nn::Network& net, const Tensor& input, std::size_t target_class,
                             const std::string& layer, const Tensor& a, TargetScore score) {
  require_spatial_layer(net, layer);
  ad::Tape tape;
  nn::Context ctx(tape, nn::Mode::infer);
  Shape s{1};
  s.insert(s.end(), a.shape().begin(), a.shape().end());
  ctx.override_output(layer, a.reshaped(s));
  const ad::Var probs = net.forward(ctx, tape.constant(batch_of_one(net, input)));
  return target_score(ctx, probs, target_class, score).value().item();
}

Tensor weight_combine(const std::vector<double>& weights, const Tensor& maps) {
  if (maps.rank() != 3) throw DimensionError("weight_combine expects [K,h,w] maps, got " + shape_string(maps.shape()));
  if (weights.size() != maps.dim(0)) {
    throw DimensionError("weight_combine: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(maps.dim(0)) + " maps");
  }
  const std::size_t h = maps.dim(1), w = maps.dim(2), plane = h * w;
  Tensor out({h, w}, 0.0);
  for (std::size_t k = 0; k < weights.size(); ++k)
    for (std::size_t i = 0; i < plane; ++i) out[i] += weights[k] * maps[k * plane + i];
  for (auto& v : out.data()) v = std::max(v, 0.0);
  return out;
}

Heatmap gradcam(nn::Network& net, const Tensor& input, std::size_t target_class, const GradCamOptions& options) {
  const std::string layer = options.layer.empty() ? default_gradcam_layer(net) : options.layer;
  require_spatial_layer(net, layer);

  ad::Tape tape;
  nn::Context ctx(tape, nn::Mode::infer);
  ctx.watch_output(layer);
  const ad::Var probs = net.forward(ctx, tape.constant(batch_of_one(net, input)));
  const ad::Var y = target_score(ctx, probs, target_class, options.score);
  const auto* a = find_output(ctx, layer);
  const auto grads = ad::backward(tape, y);
  const Tensor g = grads.wrt(a->var);

  const Tensor& av = a->var.value();
  const std::size_t k = av.dim(1), h = av.dim(2), w = av.dim(3), plane = h * w;
  Heatmap hm;
  hm.layer = layer;
  hm.target_class = target_class;
  hm.weights.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += g[c * plane + i];
    hm.weights[c] = s / static_cast<double>(plane);
  }
  hm.raw = weight_combine(hm.weights, av.reshaped({k, h, w}));
  const double peak = *std::max_element(hm.raw.data().begin(), hm.raw.data().end());
  hm.normalized = Tensor({h, w}, 0.0);
  if (peak > 0) {
    for (std::size_t i = 0; i < plane; ++i) hm.normalized[i] = hm.raw[i] / peak;
  }
  const std::size_t out_h = input.dim(1), out_w = input.dim(2);
  hm.upsampled = data::resize(hm.normalized.reshaped({1, h, w}), out_h, out_w).reshaped({out_h, out_w});
  return hm;
}

// ---------------------------------------------------------------------------

MaskStats mask_stats(const Tensor& map) {
  if (map.size() == 0) throw DimensionError("mask_stats needs a non-empty map");
  const auto n = static_cast<double>(map.size());
  MaskStats s;
  double sum = 0;
  for (double v : map.data()) sum += v;
  // A constant map gets its value back exactly, hence sd = 0.
  const bool constant = std::all_of(map.data().begin(), map.data().end(), [&](double v) { return v == map[0]; });
  s.mean = constant ? map[0] : sum / n;
  double ss = 0;
  for (double v : map.data()) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / n);
  s.threshold = s.mean + s.sd;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (map[i] > s.threshold) s.mask.push_back(i);
  s.empty = s.mask.empty();
  s.mask_mean = masked_mean(map, s.mask);
  return s;
}

double masked_mean(const Tensor& map, const std::vector<std::size_t>& mask) {
  if (mask.empty()) return 0.0;
  double s = 0;
  for (auto i : mask) s += map.data()[i];
  return s / static_cast<double>(mask.size());
}

MaskComparison mask_compare(const Tensor& template_map, const Tensor& other) {
  if (template_map.shape() != other.shape()) {
    throw DimensionError("mask_compare shape mismatch " + shape_string(template_map.shape()) + " vs " +
                         shape_string(other.shape()));
  }
  MaskComparison c;
  c.template_stats = mask_stats(template_map);
  c.template_mean = c.template_stats.mask_mean;
  c.other_mean = masked_mean(other, c.template_stats.mask);
  return c;
}

// ---------------------------------------------------------------------------

Tensor normalize_to_byte(const Tensor& map) {
  Tensor out(map.shape(), 0.0);
  if (map.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double min = *lo, range = *hi - *lo;
  if (!(range > 0)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = std::round(255.0 * (map[i] - min) / range);
  return out;
}

Tensor tile_grid(const Tensor& maps) {
  if (maps.rank() != 3) throw DimensionError("tile_grid expects [F,h,w], got " + shape_string(maps.shape()));
  const std::size_t f = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(f))));
  while (cols * cols < f) ++cols;
  while (cols > 1 && (cols - 1) * (cols - 1) >= f) --cols;
  const std::size_t rows = (f + cols - 1) / cols;
  const std::size_t gh = rows * h + rows - 1, gw = cols * w + cols - 1;
  Tensor grid({1, gh, gw}, 0.0);
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x)
      if (y % (h + 1) == h || x % (w + 1) == w) grid[y * gw + x] = kGridSeparator;
  for (std::size_t k = 0; k < f; ++k) {
    const std::size_t r = k / cols, c = k % cols;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        grid[(r * (h + 1) + y) * gw + c * (w + 1) + x] = maps[(k * h + y) * w + x];
  }
  return grid;
}

std::vector<LayerDump> activation_dump(nn::Network& net, const Tensor& input, const std::vector<std::string>& layers) {
  ad::Tape tape;
  nn::Context ctx(tape, nn::Mode::infer);
  net.forward(ctx, tape.constant(batch_of_one(net, input)));

  std::vector<std::string> selected = layers;
  if (selected.empty()) {
    for (const auto& o : ctx.outputs())
      if (o.kind == nn::LayerKind::conv || o.kind == nn::LayerKind::depthwise_conv) selected.push_back(o.name);
  }
  std::vector<std::string> valid;
  for (const auto& o : ctx.outputs())
    if (o.var.value().rank() == 4) valid.push_back(o.name);

  std::vector<LayerDump> out;
  for (const auto& name : selected) {
    const auto* o = find_output(ctx, name);
    if (!o || o->var.value().rank() != 4) {
      throw ConfigError("unknown or non-spatial layer '" + name + "'; valid layers: " + joined(valid));
    }
    const Tensor& v = o->var.value();
    const std::size_t f = v.dim(1), h = v.dim(2), w = v.dim(3), plane = h * w;
    Tensor maps({f, h, w});
    for (std::size_t k = 0; k < f; ++k) {
      Tensor one({h, w});
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(k * plane), plane, one.data().begin());
      const Tensor norm = normalize_to_byte(one);
      std::copy(norm.data().begin(), norm.data().end(), maps.data().begin() + static_cast<std::ptrdiff_t>(k * plane));
    }
    out.push_back(LayerDump{name, f, h, w, tile_grid(maps)});
  }
  return out;
}

// ---------------------------------------------------------------------------

const std::array<Rgb, 256>& color_ramp() {
  static const std::array<Rgb, 256> table = [] {
    std::array<Rgb, 256> t{};
    auto byte = [](double v) { return static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
    for (int i = 0; i < 256; ++i) {
      const double s = i / 255.0 * 4.0;  // four equal segments
      double r = 0, g = 0, b = 0;
      if (s <= 1) {
        b = s;
      } else if (s <= 2) {
        g = s - 1, b = 1;
      } else if (s <= 3) {
        r = s - 2, g = 1, b = 3 - s;
      } else {
        r = 1, g = 4 - s;
      }
      t[static_cast<std::size_t>(i)] = Rgb{byte(r), byte(g), byte(b)};
    }
    return t;
  }();
  return table;
}

Tensor overlay(const Tensor& gray, const Tensor& heat) {
  const std::size_t h = heat.rank() == 2 ? heat.dim(0) : 0, w = heat.rank() == 2 ? heat.dim(1) : 0;
  if (heat.rank() != 2 || gray.size() != heat.size()) {
    throw DimensionError("overlay: gray " + shape_string(gray.shape()) + " and heat " + shape_string(heat.shape()) +
                         " differ");
  }
  const auto& ramp = color_ramp();
  Tensor out({3, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto idx = static_cast<std::size_t>(std::clamp(std::lround(heat[i]), 0L, 255L));
    for (std::size_t c = 0; c < 3; ++c)
      out[c * h * w + i] = std::round((1 - kOverlayAlpha) * gray[i] + kOverlayAlpha * ramp[idx][c]);
  }
  return out;
}

Tensor to_byte_image(const Tensor& unit_map) {
  Tensor out(unit_map.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::round(255.0 * std::clamp(unit_map[i], 0.0, 1.0));
  return out;
}

}  // namespace ctnet::explain
