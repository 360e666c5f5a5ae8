#include "ctnet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <ostream>
#include <sstream>

#include "ctnet/error.hpp"

namespace ctnet {

namespace {

// Guards against absurd extents in corrupted files before allocating.
constexpr std::uint64_t kMaxSerializedElements = std::uint64_t{1} << 32;
constexpr std::uint64_t kMaxSerializedRank = 16;

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  }
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index of rank " + std::to_string(index.size()) + " for shape " + shape_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of bounds for shape " + shape_string(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u64(out, t.rank());
  for (auto e : t.shape()) write_u64(out, e);
  for (double v : t.data()) write_f64(out, v);
}

std::uint64_t BinaryReader::read_u64() {
  unsigned char bytes[8];
  in_.read(reinterpret_cast<char*>(bytes), 8);
  if (in_.gcount() != 8) throw FormatError("unexpected end of data", offset_ + static_cast<std::size_t>(in_.gcount()));
  offset_ += 8;
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

double BinaryReader::read_f64() { return std::bit_cast<double>(read_u64()); }

std::string BinaryReader::read_bytes(std::size_t n) {
  std::string s(n, '\0');
  in_.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError("unexpected end of data", offset_ + static_cast<std::size_t>(in_.gcount()));
  }
  offset_ += n;
  return s;
}

Tensor read_tensor(BinaryReader& in) {
  const std::size_t start = in.offset();
  const std::uint64_t rank = in.read_u64();
  if (rank > kMaxSerializedRank) throw FormatError("implausible tensor rank " + std::to_string(rank), start);
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    const std::size_t at = in.offset();
    e = in.read_u64();
    if (e == 0) throw FormatError("zero tensor extent", at);
    count *= e;
    if (count > kMaxSerializedElements) throw FormatError("implausible tensor size", at);
  }
  std::vector<double> data(count);
  for (auto& v : data) v = in.read_f64();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace ctnet
