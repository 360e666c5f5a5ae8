#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "ctnet/layers.hpp"

namespace ctnet::nn {

struct ActivationEntry {
  std::string name;
  LayerKind kind;
  Tensor value;
};

// Output of every named layer for one forward pass, in execution order.
using ActivationRecord = std::vector<ActivationEntry>;

struct Recording {
  Tensor probabilities;
  ActivationRecord record;
};

// Sequential stack of named layers ending in a softmax over K classes.
class Network {
 public:
  static constexpr const char* kLogitsLayer = "logits";

  Network(std::size_t num_classes, std::size_t input_channels, std::size_t resolution);
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  // Throws ConfigError if any recorded name is already taken.
  void add(std::unique_ptr<Layer> layer);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t input_channels() const { return input_channels_; }
  std::size_t resolution() const { return resolution_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

  // Architecture text this network was built from (stored in checkpoints).
  const std::string& description() const { return description_; }
  void set_description(std::string text) { description_ = std::move(text); }

  // All parameters including running statistics, in layer order.
  std::vector<Parameter*> parameters();
  std::vector<Parameter*> trainable_parameters();
  std::size_t parameter_count();

  std::vector<std::string> recorded_names() const;

  // Records the full pass on ctx's tape and returns the probability node.
  // The input must be [N, input_channels, resolution, resolution].
  ad::Var forward(Context& ctx, ad::Var input);

  Tensor forward(const Tensor& input, Mode mode = Mode::infer);
  Recording forward_with_recording(const Tensor& input, Mode mode = Mode::infer);

  void validate_input(const Shape& shape) const;

 private:
  std::size_t num_classes_;
  std::size_t input_channels_;
  std::size_t resolution_;
  std::string description_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<std::string> names_;
};

ActivationRecord to_record(const Context& ctx);

// Replaces every batch-norm running statistic with the plain average of the
// per-batch statistics over the given [N,C,H,W] batches (train-mode passes
// without gradients). Dropout is active during these passes.
void recalibrate_batch_norm(Network& net, const std::vector<Tensor>& batches);

// ---------------------------------------------------------------------------
// Checkpoints.
//
// File layout (integers u64 little-endian, reals IEEE-754 f64 little-endian):
//   "GSCK1"
//   u64 length, then that many bytes of architecture text
//   u64 epoch, f64 validation metric, u64 rng state
//   u64 tensor count, then each parameter tensor (write_tensor) in layer order

struct Checkpoint {
  std::string description;
  std::vector<Tensor> tensors;
  std::uint64_t epoch = 0;
  double metric = 0.0;
  std::uint64_t rng_state = 0;
};

inline constexpr char kCheckpointMagic[] = "GSCK1";

Checkpoint capture(Network& net, std::uint64_t epoch = 0, double metric = 0.0, std::uint64_t rng_state = 0);
// Copies tensors into the network; throws DimensionError naming the first
// parameter whose shape differs.
void restore(Network& net, const Checkpoint& ckpt);

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctnet::nn
