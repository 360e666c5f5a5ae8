#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace ctnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. The shape is fixed at construction;
// reshaped() produces a new tensor over a copy of the same values.
class Tensor {
 public:
  // Rank-0 scalar holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  // Multi-index access; throws DimensionError on rank or bound violations.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  // Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;

  void fill(double value);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

// Binary layout: u64 rank, u64 extents, then the values as IEEE-754 doubles,
// everything little-endian.
void write_tensor(std::ostream& out, const Tensor& t);

// Byte-offset-aware little-endian reader used by every binary format in the project.
class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  std::uint64_t read_u64();
  double read_f64();
  std::string read_bytes(std::size_t n);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);

Tensor read_tensor(BinaryReader& in);

}  // namespace ctnet
