#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctnet/error.hpp"
#include "ctnet/layers.hpp"
#include "ctnet/network.hpp"
#include "ctnet/scaling.hpp"
#include "support.hpp"

using namespace ctnet;
using namespace ctnet::nn;
using ad::Tape;
using ad::Var;

namespace {

Tensor ones(const Shape& s) { return Tensor(s, 1.0); }

// Largest relative error over the layer's input and every trainable parameter.
double layer_gradient_error(Layer& layer, const Tensor& x, Mode mode, std::uint64_t dropout_seed = 0) {
  double worst = ad::gradient_check(
      [&](Tape& t, Var in) {
        Context ctx(t, mode);
        ctx.set_dropout_seed(dropout_seed);
        return testing::project(t, layer.forward(ctx, in), 99);
      },
      x);
  std::vector<Parameter*> params;
  layer.collect_parameters(params);
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    CAPTURE(p->name);
    const double e = ad::gradient_check(
        [&](Tape& t, Var v) {
          Context ctx(t, mode);
          ctx.set_dropout_seed(dropout_seed);
          ctx.override_parameter(*p, v);
          return testing::project(t, layer.forward(ctx, t.constant(x)), 99);
        },
        p->value);
    CHECK(e < 1e-4);
    worst = std::max(worst, e);
  }
  return worst;
}

// Randomizes batch-norm affine parameters so their gradients are exercised
// away from the identity.
void perturb_parameters(Layer& layer, Rng& rng) {
  std::vector<Parameter*> params;
  layer.collect_parameters(params);
  for (Parameter* p : params) {
    if (p->name.find("/gamma") != std::string::npos) {
      for (auto& v : p->value.data()) v = rng.uniform(0.5, 1.5);
    } else if (p->name.find("/beta") != std::string::npos || p->name.find("/bias") != std::string::npos) {
      for (auto& v : p->value.data()) v = rng.uniform(-0.5, 0.5);
    } else if (p->name.find("moving_variance") != std::string::npos) {
      for (auto& v : p->value.data()) v = rng.uniform(0.5, 2.0);
    } else if (p->name.find("moving_mean") != std::string::npos) {
      for (auto& v : p->value.data()) v = rng.uniform(-0.5, 0.5);
    }
  }
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("conv2d examples") {
  Rng rng(1);
  const Tensor x = testing::random_tensor({2, 3, 4, 5}, rng);
  ConvParams id;
  id.weights = Tensor({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) id.weights.at({c, c, 0, 0}) = 1;
  CHECK(conv2d(x, id) == x);

  ConvParams box;
  box.weights = ones({1, 1, 3, 3});
  CHECK(conv2d(ones({1, 1, 3, 3}), box).reshaped({3, 3}) == Tensor::matrix({{4, 6, 4}, {6, 9, 6}, {4, 6, 4}}));

  ConvParams zero;
  zero.weights = Tensor({2, 3, 3, 3});
  CHECK(conv2d(x, zero) == Tensor({2, 2, 4, 5}));

  ConvParams biased = zero;
  biased.bias = Tensor::vector({1.5, -2});
  const Tensor y = conv2d(x, biased);
  CHECK(y.at({1, 0, 3, 4}) == 1.5);
  CHECK(y.at({0, 1, 0, 0}) == -2);
}

TEST_CASE("conv2d channel mismatch is an error") {
  ConvParams p;
  p.weights = Tensor({1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(Tensor({1, 3, 4, 4}), p), DimensionError);
}

TEST_CASE("same padding at stride 1 keeps extents for odd kernels") {
  Rng rng(2);
  const Tensor x = testing::random_tensor({1, 2, 7, 6}, rng);
  for (std::size_t k : {1, 3, 5, 7}) {
    ConvParams p;
    p.weights = testing::random_tensor({3, 2, k, k}, rng);
    CHECK(conv2d(x, p).shape() == Shape{1, 3, 7, 6});
    CHECK(depthwise_conv2d(x, testing::random_tensor({2, 1, k, k}, rng), 1, Padding::same).shape() ==
          Shape{1, 2, 7, 6});
  }
  ConvParams s2;
  s2.weights = testing::random_tensor({1, 2, 3, 3}, rng);
  s2.stride = 2;
  CHECK(conv2d(x, s2).shape() == Shape{1, 1, 4, 3});
}

TEST_CASE("depthwise examples") {
  Rng rng(3);
  const Tensor x = testing::random_tensor({2, 2, 3, 3}, rng);
  const Tensor twos({2, 1, 1, 1}, 2.0);
  const Tensor y = depthwise_conv2d(x, twos, 1, Padding::same);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == 2 * x[i]);

  Tensor k = testing::random_tensor({2, 1, 3, 3}, rng);
  for (std::size_t i = 0; i < 9; ++i) k[i] = 0;
  const Tensor z = depthwise_conv2d(x, k, 1, Padding::same);
  Tensor x1({2, 1, 3, 3}), k1({1, 1, 3, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) x1[n * 9 + i] = x[n * 18 + 9 + i];
  for (std::size_t i = 0; i < 9; ++i) k1[i] = k[9 + i];
  const Tensor z1 = depthwise_conv2d(x1, k1, 1, Padding::same);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(z[n * 18 + i] == 0.0);
      CHECK(z[n * 18 + 9 + i] == z1[n * 9 + i]);
    }

  CHECK(depthwise_conv2d(ones({1, 1, 3, 3}), ones({1, 1, 3, 3}), 1, Padding::same).reshaped({3, 3}) ==
        Tensor::matrix({{4, 6, 4}, {6, 9, 6}, {4, 6, 4}}));
  CHECK_THROWS_AS(depthwise_conv2d(x, Tensor({3, 1, 3, 3}), 1, Padding::same), DimensionError);
}

TEST_CASE("batch norm examples") {
  Rng rng(4);
  const Tensor x = testing::random_tensor({8, 3, 4, 4}, rng, -3, 5);
  auto st = BatchNormState::identity(3);
  st.mode = Mode::train;
  const Tensor y = batch_norm(x, st);
  const std::size_t plane = 16, per = 8 * plane;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < plane; ++i) s += y[(n * 3 + c) * plane + i];
    const double mean = s / per;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < plane; ++i) ss += std::pow(y[(n * 3 + c) * plane + i] - mean, 2);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(ss / per <= 1.0);
    CHECK(ss / per >= 1.0 - 5e-3);
  }
  // Running statistics moved 1% of the way toward the batch statistics.
  for (std::size_t c = 0; c < 3; ++c) CHECK(st.running_var[c] >= 0.0);
  CHECK(st.running_mean[0] != 0.0);

  auto inf = BatchNormState::identity(3);
  CHECK(testing::max_abs_diff(batch_norm(x, inf), x) < 5 * 1e-3 / 2 * 1.01);

  auto zero_gamma = BatchNormState::identity(3);
  zero_gamma.gamma = Tensor({3}, 0.0);
  zero_gamma.beta = Tensor::vector({1, 2, 3});
  const Tensor b = batch_norm(x, zero_gamma);
  CHECK(b.at({5, 2, 1, 1}) == 3.0);
  CHECK(b.at({0, 0, 3, 0}) == 1.0);
}

TEST_CASE("batch norm running average update") {
  Tensor x({2, 1, 1, 1});
  x[0] = 1;
  x[1] = 3;
  auto st = BatchNormState::identity(1);
  st.mode = Mode::train;
  batch_norm(x, st);
  CHECK(st.running_mean[0] == doctest::Approx(0.01 * 2.0));
  CHECK(st.running_var[0] == doctest::Approx(0.99 + 0.01 * 1.0));
}

TEST_CASE("batch of one with zero variance is permitted") {
  auto st = BatchNormState::identity(1);
  st.mode = Mode::train;
  const Tensor y = batch_norm(Tensor({1, 1, 2, 2}, 5.0), st);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("swish examples") {
  CHECK(swish(Tensor::scalar(0)).item() == 0.0);
  CHECK(swish(Tensor::scalar(1)).item() == doctest::Approx(0.7310586).epsilon(1e-7));
  const double v = swish(Tensor::scalar(-20)).item();
  CHECK(v == doctest::Approx(-20.0 / (1.0 + std::exp(20.0))).epsilon(1e-12));
  CHECK(v == doctest::Approx(-4.1e-8).epsilon(0.01));
  CHECK(std::isfinite(swish(Tensor::scalar(-800)).item()));
  CHECK(swish(Tensor::scalar(800)).item() == 800.0);
}

TEST_CASE("squeeze-excite gates") {
  Rng rng(5);
  const Tensor x = testing::random_tensor({2, 4, 3, 3}, rng);
  SqueezeExciteParams p{Tensor({4, 1}), Tensor({1}), Tensor({1, 4}), Tensor({4}, 40.0)};
  CHECK(testing::max_abs_diff(squeeze_excite(x, p), x) < 1e-15);
  p.expand_b = Tensor({4}, -40.0);
  CHECK(testing::max_abs_diff(squeeze_excite(x, p), Tensor(x.shape())) < 1e-16);
  p.expand_b = Tensor({4}, 0.0);
  const Tensor half = squeeze_excite(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(half[i] == x[i] / 2);
}

TEST_CASE("global average pool") {
  CHECK(global_avg_pool(Tensor::matrix({{1, 3}, {5, 7}}).reshaped({1, 1, 2, 2})).item() == 4.0);
  CHECK(global_avg_pool(Tensor({1, 1, 3, 3}, 0.37)).item() == 0.37);
  CHECK(global_avg_pool(Tensor({2, 3, 2, 2})) == Tensor({2, 3}));
}

TEST_CASE("softmax examples") {
  const Tensor u = softmax(Tensor({1, 3}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const Tensor s = softmax(Tensor::matrix({{1 + 50.0, 1 + 50.0, 1 + 50.0}}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const Tensor p = softmax(Tensor::matrix({{2, 0, 0}}));
  CHECK(p[0] == doctest::Approx(0.7869860).epsilon(1e-7));
  CHECK(p[1] == doctest::Approx(0.1065070).epsilon(1e-7));
  CHECK(p[2] == doctest::Approx(0.1065070).epsilon(1e-7));
}

TEST_CASE("softmax rows are probability vectors and shift invariant") {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const Tensor z = testing::random_tensor({3, 5}, rng, -30, 30);
    const Tensor p = softmax(z);
    Tensor shifted = z;
    const double c = rng.uniform(-100, 100);
    for (auto& v : shifted.data()) v += c;
    const Tensor q = softmax(shifted);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        REQUIRE(p.at({r, k}) >= 0.0);
        s += p.at({r, k});
      }
      REQUIRE(std::abs(s - 1) < 1e-9);
    }
    REQUIRE(testing::max_abs_diff(p, q) < 1e-12);
  }
}

TEST_CASE("mbconv with zero convolution weights reduces to the skip path") {
  Rng rng(7);
  MBConvConfig cfg{6.0, 3, 1, 8, 8, 0.25};
  MBConvBlock block("b", cfg, rng);
  std::vector<Parameter*> params;
  block.collect_parameters(params);
  for (Parameter* p : params)
    if (p->name.find("kernel") != std::string::npos && p->name.find("_se") == std::string::npos) p->value.fill(0.0);
  const Tensor x = testing::random_tensor({2, 8, 4, 4}, rng);
  Tape tape;
  Context ctx(tape, Mode::infer);
  CHECK(block.forward(ctx, tape.constant(x)).value() == x);
}

TEST_CASE("mbconv residual is added exactly when shapes allow") {
  Rng rng(8);
  for (int trial = 0; trial < 12; ++trial) {
    MBConvConfig cfg;
    cfg.expansion = trial % 3 == 0 ? 1.0 : 4.0;
    cfg.kernel = trial % 2 ? 3 : 5;
    cfg.stride = trial % 4 < 2 ? 1 : 2;
    cfg.in_ch = 8;
    cfg.out_ch = trial % 5 == 0 ? 16 : 8;
    MBConvBlock block("m", cfg, rng);
    const Tensor x = testing::random_tensor({1, 8, 4, 4}, rng);
    Tape tape;
    Context ctx(tape, Mode::infer);
    const Tensor y = block.forward(ctx, tape.constant(x)).value();
    Tensor branch;
    for (const auto& o : ctx.outputs())
      if (o.name == "m_project_bn") branch = o.var.value();
    const bool skip = cfg.stride == 1 && cfg.in_ch == cfg.out_ch;
    CHECK(cfg.has_skip() == skip);
    CHECK(y.shape() == Shape{1, cfg.out_ch, cfg.stride == 1 ? 4u : 2u, cfg.stride == 1 ? 4u : 2u});
    if (skip) {
      for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == branch[i] + x[i]);
    } else {
      CHECK(y == branch);
    }
  }
}

TEST_CASE("mbconv stride 2 halves extents with ceiling") {
  Rng rng(9);
  MBConvBlock block("s", MBConvConfig{6.0, 3, 2, 4, 8, 0.25}, rng);
  Tape tape;
  Context ctx(tape, Mode::infer);
  CHECK(block.forward(ctx, tape.constant(Tensor({1, 4, 5, 5}))).shape() == Shape{1, 8, 3, 3});
  CHECK_THROWS_AS(MBConvBlock("bad", MBConvConfig{1.0, 3, 3, 4, 4, 0.25}, rng), ConfigError);
}

TEST_CASE("mbconv without expansion counts depthwise, SE and projection parameters") {
  Rng rng(10);
  const MBConvConfig cfg{1.0, 3, 1, 16, 24, 0.25};
  MBConvBlock block("e", cfg, rng);
  std::vector<Parameter*> params;
  block.collect_parameters(params);
  std::size_t n = 0;
  for (auto* p : params) n += p->value.size();
  for (auto* p : params) CHECK(p->name.find("expand_conv") == std::string::npos);
  const auto expect = scaling::depthwise_cost(16, 3, 4, 4).params + scaling::batch_norm_cost(16).params +
                      scaling::squeeze_excite_cost(16, 4).params + scaling::conv_cost(16, 24, 1, false, 4, 4).params +
                      scaling::batch_norm_cost(24).params;
  CHECK(n == expect);
  CHECK(scaling::mbconv_cost(cfg, 4, 4).params == expect);
}

TEST_CASE("every layer type passes the gradient check") {
  Rng rng(11);
  const Tensor x = testing::random_tensor({2, 3, 4, 4}, rng);
  SUBCASE("conv") {
    Conv2D l("c", 3, 4, 3, 1, Padding::same, true, rng);
    perturb_parameters(l, rng);
    CHECK(layer_gradient_error(l, x, Mode::train) < 1e-4);
    Conv2D s("s", 3, 2, 3, 2, Padding::valid, false, rng);
    CHECK(layer_gradient_error(s, x, Mode::train) < 1e-4);
  }
  SUBCASE("depthwise") {
    DepthwiseConv2D l("d", 3, 3, 2, Padding::same, rng);
    CHECK(layer_gradient_error(l, x, Mode::train) < 1e-4);
  }
  SUBCASE("batch norm, both modes") {
    BatchNorm l("bn", 3);
    perturb_parameters(l, rng);
    CHECK(layer_gradient_error(l, x, Mode::train) < 1e-4);
    CHECK(layer_gradient_error(l, x, Mode::infer) < 1e-4);
  }
  SUBCASE("activations") {
    for (auto fn : {Activation::swish, Activation::sigmoid, Activation::relu}) {
      ActivationLayer l("a", fn);
      Tensor away = x;
      for (auto& v : away.data()) v += v >= 0 ? 0.05 : -0.05;  // keep relu off its kink
      CHECK(layer_gradient_error(l, away, Mode::train) < 1e-4);
    }
  }
  SUBCASE("squeeze-excite") {
    SqueezeExcite l("se", 3, 1, rng);
    perturb_parameters(l, rng);
    CHECK(layer_gradient_error(l, x, Mode::train) < 1e-4);
  }
  SUBCASE("pool, dense, dropout, softmax") {
    GlobalAvgPool pool("p");
    CHECK(layer_gradient_error(pool, x, Mode::train) < 1e-4);
    const Tensor flat = testing::random_tensor({2, 5}, rng);
    Dense d("fc", 5, 3, true, rng);
    perturb_parameters(d, rng);
    CHECK(layer_gradient_error(d, flat, Mode::train) < 1e-4);
    Dropout drop("drop", 0.3);
    CHECK(layer_gradient_error(drop, flat, Mode::train, 17) < 1e-4);
    Softmax sm("sm");
    CHECK(layer_gradient_error(sm, flat, Mode::train) < 1e-4);
  }
  SUBCASE("mbconv with and without skip") {
    MBConvBlock skip("k", MBConvConfig{4.0, 3, 1, 3, 3, 0.25}, rng);
    perturb_parameters(skip, rng);
    CHECK(layer_gradient_error(skip, x, Mode::train) < 1e-4);
    MBConvBlock down("n", MBConvConfig{1.0, 3, 2, 3, 5, 0.5}, rng);
    perturb_parameters(down, rng);
    CHECK(layer_gradient_error(down, x, Mode::train) < 1e-4);
  }
}

TEST_CASE("full toy network loss passes the gradient check on a 4x4 input") {
  scaling::BaseArchitecture a;
  a.name = "tiny";
  a.resolution = 4;
  a.stem_channels = 8;
  a.stem_stride = 1;
  a.stages = {{1, 8, 3, 1, 1.0, 0.25}, {1, 8, 3, 2, 2.0, 0.25}};
  a.head_channels = 8;
  auto net = scaling::build_network(scaling::identity_plan(a), 3);
  Rng rng(12);
  for (auto* p : net.parameters()) {
    if (p->name.find("/gamma") != std::string::npos)
      for (auto& v : p->value.data()) v = rng.uniform(0.5, 1.5);
    if (p->name.find("/beta") != std::string::npos)
      for (auto& v : p->value.data()) v = rng.uniform(-0.5, 0.5);
  }
  const Tensor x = testing::random_tensor({3, 1, 4, 4}, rng);
  const Tensor targets = Tensor::matrix({{0.9, 0.05, 0.05}, {0.05, 0.9, 0.05}, {0.05, 0.05, 0.9}});
  auto loss = [&](Tape& t, Context& ctx, Var in) {
    return ad::cross_entropy(net.forward(ctx, in), t.constant(targets));
  };
  CHECK(ad::gradient_check(
            [&](Tape& t, Var in) {
              Context ctx(t, Mode::train);
              return loss(t, ctx, in);
            },
            x) < 1e-4);
  for (auto* p : net.trainable_parameters()) {
    CAPTURE(p->name);
    const auto r = testing::gradient_agreement(
        [&](Tape& t, Var v) {
          Context ctx(t, Mode::train);
          ctx.override_parameter(*p, v);
          return loss(t, ctx, t.constant(x));
        },
        p->value);
    CAPTURE(r.relative_error);
    CHECK(r.ok(1e-4));
  }
}

TEST_CASE("network forward: uniform head, resolution check, recording") {
  auto net = scaling::build_network(scaling::identity_plan(scaling::toy_b0(3)), 1);
  for (auto* p : net.parameters())
    if (p->name.rfind("logits/", 0) == 0) p->value.fill(0.0);
  Rng rng(13);
  const Tensor x = testing::random_tensor({2, 1, 32, 32}, rng, 0, 1);
  const Tensor p = net.forward(x);
  for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK_THROWS_AS(net.forward(Tensor({1, 1, 16, 16})), DimensionError);

  auto fresh = scaling::build_network(scaling::identity_plan(scaling::toy_b0(3)), 1);
  const Tensor q = fresh.forward(x);
  const auto rec = fresh.forward_with_recording(x);
  CHECK(rec.probabilities == q);
  CHECK(rec.record.size() == fresh.recorded_names().size());
  for (std::size_t i = 0; i < rec.record.size(); ++i) CHECK(rec.record[i].name == fresh.recorded_names()[i]);
  CHECK(rec.record.back().value == q);
}

TEST_CASE("replaying a recorded two-layer network reproduces the forward pass") {
  Rng rng(14);
  Network net(2, 1, 3);
  net.add(std::make_unique<InputLayer>("input"));
  net.add(std::make_unique<GlobalAvgPool>("pool"));
  auto dense = std::make_unique<Dense>("logits", 1, 2, true, rng);
  Dense* d = dense.get();
  net.add(std::move(dense));
  net.add(std::make_unique<Softmax>("probs"));
  const Tensor x = testing::random_tensor({2, 1, 3, 3}, rng);
  const auto rec = net.forward_with_recording(x);
  REQUIRE(rec.record.size() == 4);
  const Tensor pooled = global_avg_pool(rec.record[0].value);
  CHECK(pooled == rec.record[1].value);
  Tape t;
  const Tensor logits = ad::linear(t.constant(pooled), t.constant(d->weights().value), t.constant(d->bias()->value)).value();
  CHECK(logits == rec.record[2].value);
  CHECK(softmax(logits) == rec.probabilities);
}

TEST_CASE("duplicate layer names are rejected") {
  Network net(2, 1, 4);
  net.add(std::make_unique<InputLayer>("a"));
  CHECK_THROWS_AS(net.add(std::make_unique<GlobalAvgPool>("a")), ConfigError);
}

TEST_CASE("weight initialization") {
  Rng rng(15);
  Conv2D c("c", 16, 32, 3, 1, Padding::same, false, rng);
  const double sigma = std::sqrt(2.0 / (16 * 9));
  double ss = 0;
  for (double v : c.weights().value.data()) {
    REQUIRE(std::abs(v) <= 2 * sigma);
    ss += v * v;
  }
  // A normal truncated at 2 sigma keeps about 77.4% of the variance.
  CHECK(ss / c.weights().value.size() == doctest::Approx(0.774 * sigma * sigma).epsilon(0.05));
  Dense d("d", 20, 10, true, rng);
  const double limit = std::sqrt(6.0 / 30);
  for (double v : d.weights().value.data()) REQUIRE(std::abs(v) <= limit);
  for (double v : d.bias()->value.data()) CHECK(v == 0.0);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  auto net = scaling::build_network(scaling::identity_plan(scaling::toy_b0(3)), 2);
  Rng rng(16);
  const Tensor x = testing::random_tensor({2, 1, 32, 32}, rng, 0, 1);
  net.forward(x, Mode::train);  // move running statistics away from their defaults
  const Tensor before = net.forward(x);
  const auto dir = testing::temp_dir("ckpt");
  const auto path = (dir / "net.gsck").string();
  save_checkpoint(path, capture(net, 3, 0.75, 99));
  const auto ck = load_checkpoint(path);
  CHECK(ck.epoch == 3);
  CHECK(ck.metric == 0.75);
  CHECK(ck.rng_state == 99);
  CHECK(testing::slurp(path).substr(0, 5) == "GSCK1");
  auto other = scaling::network_from_checkpoint(ck);
  CHECK(other.forward(x) == before);
}

TEST_CASE("truncated or foreign checkpoint files are rejected with an offset") {
  auto net = scaling::build_network(scaling::identity_plan(scaling::toy_b0(3)), 2);
  std::ostringstream out;
  write_checkpoint(out, capture(net));
  const std::string bytes = out.str();
  std::istringstream cut(bytes.substr(0, bytes.size() / 2));
  try {
    read_checkpoint(cut);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 5);
    CHECK(e.offset() <= bytes.size() / 2);
  }
  std::istringstream bad("GSCK2" + bytes.substr(5));
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
}

TEST_CASE("loading into a different architecture names the first mismatch") {
  auto small = scaling::build_network(scaling::identity_plan(scaling::toy_b0(3)), 1);
  auto wide = scaling::build_network(scaling::identity_plan(scaling::toy_b0(4)), 1);
  try {
    restore(small, capture(wide));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("logits/kernel") != std::string::npos);
  }
}

}  // TEST_SUITE
