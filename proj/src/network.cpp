#include "ctnet/network.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctnet/error.hpp"

namespace ctnet::nn {

Network::Network(std::size_t num_classes, std::size_t input_channels, std::size_t resolution)
    : num_classes_(num_classes), input_channels_(input_channels), resolution_(resolution) {
  if (num_classes == 0) throw ConfigError("network needs at least one class");
  if (input_channels == 0 || resolution == 0) throw ConfigError("network input extents must be positive");
}

void Network::add(std::unique_ptr<Layer> layer) {
  for (const auto& n : layer->recorded_names()) {
    if (std::find(names_.begin(), names_.end(), n) != names_.end()) {
      throw ConfigError("duplicate layer name '" + n + "'");
    }
  }
  for (auto& n : layer->recorded_names()) names_.push_back(std::move(n));
  layers_.push_back(std::move(layer));
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) l->collect_parameters(out);
  return out;
}

std::vector<Parameter*> Network::trainable_parameters() {
  auto all = parameters();
  std::erase_if(all, [](const Parameter* p) { return !p->trainable; });
  return all;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

std::vector<std::string> Network::recorded_names() const { return names_; }

void Network::validate_input(const Shape& shape) const {
  if (shape.size() != 4 || shape[1] != input_channels_ || shape[2] != resolution_ || shape[3] != resolution_) {
    throw DimensionError("network expects input [N x " + std::to_string(input_channels_) + " x " +
                         std::to_string(resolution_) + " x " + std::to_string(resolution_) + "], got " +
                         shape_string(shape));
  }
}

ad::Var Network::forward(Context& ctx, ad::Var input) {
  validate_input(input.shape());
  if (layers_.empty() || layers_.back()->kind() != LayerKind::softmax) {
    throw ConfigError("network must end in a softmax layer");
  }
  ad::Var x = input;
  for (auto& layer : layers_) x = layer->forward(ctx, x);
  if (x.value().rank() != 2 || x.value().dim(1) != num_classes_) {
    throw DimensionError("network output " + shape_string(x.shape()) + " does not match " +
                         std::to_string(num_classes_) + " classes");
  }
  return x;
}

Tensor Network::forward(const Tensor& input, Mode mode) {
  ad::Tape tape;
  Context ctx(tape, mode);
  return forward(ctx, tape.constant(input)).value();
}

Recording Network::forward_with_recording(const Tensor& input, Mode mode) {
  ad::Tape tape;
  Context ctx(tape, mode);
  Tensor probs = forward(ctx, tape.constant(input)).value();
  return Recording{std::move(probs), to_record(ctx)};
}

ActivationRecord to_record(const Context& ctx) {
  ActivationRecord rec;
  rec.reserve(ctx.outputs().size());
  for (const auto& o : ctx.outputs()) rec.push_back(ActivationEntry{o.name, o.kind, o.var.value()});
  return rec;
}

void recalibrate_batch_norm(Network& net, const std::vector<Tensor>& batches) {
  for (std::size_t b = 0; b < batches.size(); ++b) {
    ad::Tape tape;
    Context ctx(tape, Mode::train);
    ctx.set_statistics_momentum(static_cast<double>(b) / static_cast<double>(b + 1));
    net.forward(ctx, tape.constant(batches[b]));
  }
}

// ---------------------------------------------------------------------------

Checkpoint capture(Network& net, std::uint64_t epoch, double metric, std::uint64_t rng_state) {
  Checkpoint c;
  c.description = net.description();
  for (auto* p : net.parameters()) c.tensors.push_back(p->value);
  c.epoch = epoch;
  c.metric = metric;
  c.rng_state = rng_state;
  return c;
}

void restore(Network& net, const Checkpoint& ckpt) {
  auto params = net.parameters();
  const std::size_t common = std::min(params.size(), ckpt.tensors.size());
  for (std::size_t i = 0; i < common; ++i) {
    if (params[i]->value.shape() != ckpt.tensors[i].shape()) {
      throw DimensionError("checkpoint does not match architecture at parameter '" + params[i]->name + "': expected " +
                           shape_string(params[i]->value.shape()) + ", checkpoint has " +
                           shape_string(ckpt.tensors[i].shape()));
    }
  }
  if (params.size() != ckpt.tensors.size()) {
    const std::string where = common < params.size() ? "'" + params[common]->name + "'" : "end of network";
    throw DimensionError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, network has " +
                         std::to_string(params.size()) + " (first mismatch at " + where + ")");
  }
  for (std::size_t i = 0; i < common; ++i) params[i]->value = ckpt.tensors[i];
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, 5);
  write_u64(out, ckpt.description.size());
  out.write(ckpt.description.data(), static_cast<std::streamsize>(ckpt.description.size()));
  write_u64(out, ckpt.epoch);
  write_f64(out, ckpt.metric);
  write_u64(out, ckpt.rng_state);
  write_u64(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) write_tensor(out, t);
}

Checkpoint read_checkpoint(std::istream& in) {
  BinaryReader r(in);
  if (r.read_bytes(5) != std::string(kCheckpointMagic, 5)) throw FormatError("bad checkpoint magic", 0);
  Checkpoint c;
  const std::size_t len_at = r.offset();
  const auto len = r.read_u64();
  if (len > (std::uint64_t{1} << 24)) throw FormatError("implausible description length", len_at);
  c.description = r.read_bytes(len);
  c.epoch = r.read_u64();
  c.metric = r.read_f64();
  c.rng_state = r.read_u64();
  const std::size_t count_at = r.offset();
  const auto count = r.read_u64();
  if (count > (std::uint64_t{1} << 20)) throw FormatError("implausible tensor count", count_at);
  c.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) c.tensors.push_back(read_tensor(r));
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_checkpoint(out, ckpt);
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace ctnet::nn
