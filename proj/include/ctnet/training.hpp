#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctnet/dataset.hpp"
#include "ctnet/network.hpp"

namespace ctnet::train {

Tensor one_hot(std::size_t label, std::size_t classes);
// t_k = (1 - eps) y_k + eps / K; eps must lie in [0, 1).
Tensor label_smooth(const Tensor& one_hot, double epsilon, std::size_t classes);
// -sum_k t_k log(p_k + 1e-12) for one probability vector.
double cross_entropy(const Tensor& probs, const Tensor& target);
// -sum_k t_k log t_k (0 log 0 = 0).
double entropy(const Tensor& p);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<Tensor> m, v;  // one per parameter, created on the first step
};

// One Adam update of every parameter. Throws DomainError naming the
// parameter when a gradient holds a non-finite value; nothing is modified then.
void adam_step(std::span<nn::Parameter* const> params, std::span<const Tensor> grads, AdamState& state);

// Reduce-on-plateau over validation accuracy.
struct PlateauScheduler {
  double lr = 1e-4;
  double factor = 0.5;
  std::size_t patience = 3;
  double min_improvement = 1e-4;
  double best = -1.0;  // below any accuracy, so the first epoch always improves
  std::size_t stale = 0;

  // Feeds one epoch's value and returns the learning rate for the next epoch.
  double update(double value);
};

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  data::AugmentationConfig augmentation;
  double validation_fraction = 0.15;
  double label_smoothing = 0.1;
  double learning_rate = 1e-4;
  // Schedule settings; its lr is replaced by learning_rate at the start.
  PlateauScheduler scheduler;
  // Re-estimate batch-norm running statistics over the (unaugmented) training
  // images before each validation pass.
  bool recalibrate_batch_norm = true;

  void validate() const;
};

// Images are raw 0..255 tensors at the network's resolution.
struct LabeledImages {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;

  std::size_t size() const { return images.size(); }
  LabeledImages subset(std::span<const std::size_t> indices) const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;  // rate used during the epoch
};

struct TrainResult {
  nn::Checkpoint best;
  std::vector<EpochStats> history;
};

// Validation accuracy of the network after an epoch; replaceable for tests.
using Validator = std::function<double(nn::Network& net, std::size_t epoch)>;

// Epochs of shuffled, augmented mini-batches with Adam and plateau
// scheduling; the returned checkpoint holds the epoch with the highest
// validation accuracy (earliest on ties). The network ends holding the last
// epoch's weights.
TrainResult train(nn::Network& net, const LabeledImages& train_set, const LabeledImages& val_set,
                  const TrainConfig& config, const Validator& validator = {});

// Inference in fixed-size batches on rescaled (x / 255) images.
std::vector<std::size_t> predict(nn::Network& net, const std::vector<Tensor>& images, std::size_t batch = 32);
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

// Stacks [C,H,W] images into [N,C,H,W], multiplying by scale.
Tensor stack(const std::vector<const Tensor*>& images, double scale);

}  // namespace ctnet::train
