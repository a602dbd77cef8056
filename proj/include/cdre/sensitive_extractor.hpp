#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cdre/autograd.hpp"
#include "cdre/nn.hpp"

namespace cdre::sensitive {

inline constexpr std::array<int, 3> kExtractorChannels{8, 16, 24};
inline constexpr int kMinInputSize = 8;
inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.01;

// Three feature levels at 1/2, 1/4 and 1/8 resolution.
struct FeaturePyramid {
  std::array<ag::Var, 3> levels;

  const ag::Var& operator[](std::size_t i) const { return levels[i]; }
};

// Per-scale D_i = -mean_location cosine(F_o, F_c); each in [-1, 1].
struct DistortionScore {
  std::array<double, 3> per_scale{};
};

// Siamese extractor: the same three conv/instance-norm/leaky-relu blocks
// process both the original and the compressed frame.
class SensitiveExtractor {
 public:
  SensitiveExtractor() = default;
  SensitiveExtractor(nn::ParamStore& store, std::uint64_t seed);

  FeaturePyramid extract(nn::Context& ctx, const ag::Var& image) const;

  // Convolution MACs for one image of the given size.
  double macs(int height, int width) const;
  const nn::Conv2d& block(std::size_t i) const { return blocks_.at(i); }

 private:
  std::array<nn::Conv2d, 3> blocks_;
};

// Cosine similarity term per scale as graph nodes (mean over locations).
std::array<ag::Var, 3> scale_cosines(const FeaturePyramid& original,
                                     const FeaturePyramid& compressed);

DistortionScore feature_distortion(const FeaturePyramid& original,
                                   const FeaturePyramid& compressed);

} // namespace cdre::sensitive
