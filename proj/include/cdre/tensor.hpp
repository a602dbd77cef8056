#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cdre {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. Images are [C, H, W], token sets [N, C].
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  double& at(int c, int h, int w) {
    return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  double at(int c, int h, int w) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  double& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * shape[1] + c];
  }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * shape[1] + c];
  }

  bool operator==(const Tensor& o) const = default;
};

bool all_finite(std::span<const double> values);

// FNV-1a over the raw bytes; used for freeze/determinism checks.
std::uint64_t hash_values(std::span<const double> values,
                          std::uint64_t seed = 0xcbf29ce484222325ull);

} // namespace cdre
