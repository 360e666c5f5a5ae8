#include "ctnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ctnet/error.hpp"

namespace ctnet::train {

Tensor one_hot(std::size_t label, std::size_t classes) {
  if (label >= classes) {
    throw DimensionError("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                         " classes");
  }
  Tensor t({classes}, 0.0);
  t[label] = 1.0;
  return t;
}

Tensor label_smooth(const Tensor& y, double epsilon, std::size_t classes) {
  if (!(epsilon >= 0 && epsilon < 1)) throw DomainError("label smoothing epsilon must lie in [0, 1)");
  if (y.rank() != 1 || y.size() != classes) {
    throw DimensionError("label_smooth expects a vector of " + std::to_string(classes) + " entries, got " +
                         shape_string(y.shape()));
  }
  Tensor t({classes});
  const double floor = epsilon / static_cast<double>(classes);
  for (std::size_t k = 0; k < classes; ++k) t[k] = (1 - epsilon) * y[k] + floor;
  return t;
}

double cross_entropy(const Tensor& probs, const Tensor& target) {
  if (probs.shape() != target.shape()) {
    throw DimensionError("cross_entropy shape mismatch " + shape_string(probs.shape()) + " vs " +
                         shape_string(target.shape()));
  }
  double loss = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) loss -= target[k] * std::log(probs[k] + 1e-12);
  return loss;
}

double entropy(const Tensor& p) {
  double h = 0;
  for (double v : p.data())
    if (v > 0) h -= v * std::log(v);
  return h;
}

// ---------------------------------------------------------------------------

void adam_step(std::span<nn::Parameter* const> params, std::span<const Tensor> grads, AdamState& s) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.shape() != grads[i].shape()) {
      throw DimensionError("adam_step: gradient shape " + shape_string(grads[i].shape()) + " for parameter " +
                           params[i]->name + " of shape " + shape_string(params[i]->value.shape()));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) throw DomainError("non-finite gradient for parameter " + params[i]->name);
    }
  }
  if (s.m.empty()) {
    for (auto* p : params) {
      s.m.emplace_back(p->value.shape(), 0.0);
      s.v.emplace_back(p->value.shape(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");

  ++s.t;
  const double c1 = 1 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->value.data();
    auto m = s.m[i].data();
    auto v = s.v[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1 - s.beta2) * g[j] * g[j];
      w[j] -= s.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.epsilon);
    }
  }
}

double PlateauScheduler::update(double value) {
  if (value - best > min_improvement) {
    best = value;
    stale = 0;
  } else if (++stale >= patience) {
    lr *= factor;
    stale = 0;
  }
  return lr;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("label smoothing must lie in [0, 1)");
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  if (!(scheduler.factor > 0 && scheduler.factor <= 1)) throw ConfigError("plateau factor must lie in (0, 1]");
  if (scheduler.patience < 1) throw ConfigError("plateau patience must be >= 1");
  augmentation.validate();
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  for (auto i : indices) {
    out.images.push_back(images.at(i));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

Tensor stack(const std::vector<const Tensor*>& images, double scale) {
  if (images.empty()) throw DimensionError("cannot stack zero images");
  const Shape& s = images.front()->shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t per = images.front()->size();
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->shape() != s) {
      throw DimensionError("stack: image " + std::to_string(n) + " has shape " + shape_string(images[n]->shape()) +
                           ", expected " + shape_string(s));
    }
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = (*images[n])[i] * scale;
  }
  return out;
}

std::vector<std::size_t> predict(nn::Network& net, const std::vector<Tensor>& images, std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch) {
    std::vector<const Tensor*> chunk;
    for (std::size_t i = start; i < std::min(images.size(), start + batch); ++i) chunk.push_back(&images[i]);
    const Tensor probs = net.forward(stack(chunk, 1.0 / 255.0));
    const std::size_t k = probs.dim(1);
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      const double* row = probs.data().data() + n * k;
      out.push_back(static_cast<std::size_t>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: label sequences differ in length");
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

namespace {

// Key layout for derived generators.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kAugmentStream = 2;
constexpr std::uint64_t kDropoutStream = 3;

}  // namespace

TrainResult train(nn::Network& net, const LabeledImages& train_set, const LabeledImages& val_set,
                  const TrainConfig& config, const Validator& validator) {
  config.validate();
  if (train_set.size() == 0) throw ConfigError("training set is empty");
  if (val_set.size() == 0 && !validator) throw ConfigError("validation set is empty");
  if (train_set.labels.size() != train_set.size() || val_set.labels.size() != val_set.size()) {
    throw DimensionError("image and label counts differ");
  }
  const std::size_t k = net.num_classes();
  std::vector<Tensor> targets;
  for (std::size_t c = 0; c < k; ++c) targets.push_back(label_smooth(one_hot(c, k), config.label_smoothing, k));

  auto trainable = net.trainable_parameters();
  AdamState adam;
  adam.lr = config.learning_rate;
  PlateauScheduler sched = config.scheduler;
  sched.lr = config.learning_rate;

  TrainResult result;
  bool have_best = false;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(Rng::derive(config.seed, {kShuffleStream, epoch}));
    data::shuffle(order, shuffler);

    double loss_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> augmented;
      std::vector<const Tensor*> ptrs;
      Tensor target_batch({end - start, k});
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t idx = order[i];
        Rng rng(Rng::derive(config.seed, {kAugmentStream, epoch, idx}));
        augmented.push_back(data::augment(train_set.images[idx], config.augmentation, rng));
        const Tensor& t = targets.at(train_set.labels[idx]);
        std::copy(t.data().begin(), t.data().end(), target_batch.data().begin() + (i - start) * k);
      }
      for (const auto& a : augmented) ptrs.push_back(&a);

      ad::Tape tape;
      nn::Context ctx(tape, nn::Mode::train);
      ctx.set_track_parameters(true);
      ctx.set_dropout_seed(Rng::derive(config.seed, {kDropoutStream, epoch, batch_index}));
      const ad::Var probs = net.forward(ctx, tape.constant(stack(ptrs, 1.0)));
      const ad::Var loss = ad::cross_entropy(probs, tape.constant(std::move(target_batch)));
      const double loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) {
        throw DomainError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(batch_index));
      }
      const auto grads = ad::backward(tape, loss);
      std::map<const nn::Parameter*, ad::Var> bound;
      for (const auto& [p, v] : ctx.bindings()) bound.emplace(p, v);
      std::vector<Tensor> g;
      g.reserve(trainable.size());
      for (auto* p : trainable) {
        const auto it = bound.find(p);
        g.push_back(it == bound.end() ? Tensor(p->value.shape(), 0.0) : grads.wrt(it->second));
      }
      try {
        adam_step(trainable, g, adam);
      } catch (const DomainError& e) {
        throw DomainError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(batch_index));
      }
      loss_sum += loss_value * static_cast<double>(end - start);
    }

    if (config.recalibrate_batch_norm) {
      std::vector<Tensor> batches;
      for (std::size_t start = 0; start < train_set.size(); start += config.batch_size) {
        std::vector<const Tensor*> chunk;
        for (std::size_t i = start; i < std::min(train_set.size(), start + config.batch_size); ++i)
          chunk.push_back(&train_set.images[i]);
        batches.push_back(stack(chunk, config.augmentation.rescale));
      }
      nn::recalibrate_batch_norm(net, batches);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.lr = adam.lr;
    if (validator) {
      stats.val_accuracy = validator(net, epoch);
    } else {
      stats.val_accuracy = accuracy(predict(net, val_set.images), val_set.labels);
    }
    result.history.push_back(stats);
    if (!have_best || stats.val_accuracy > result.best.metric) {
      result.best = nn::capture(net, epoch, stats.val_accuracy, config.seed);
      have_best = true;
    }
    adam.lr = sched.update(stats.val_accuracy);
  }
  return result;
}

}  // namespace ctnet::train
