#include "cdre/sensitive_extractor.hpp"

#include <algorithm>

#include "cdre/error.hpp"

namespace cdre::sensitive {

SensitiveExtractor::SensitiveExtractor(nn::ParamStore& store, std::uint64_t seed) {
  int in = 3;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    // No bias: instance norm would cancel it.
    blocks_[i] = nn::Conv2d(store, "extractor.block" + std::to_string(i + 1) + ".conv", in,
                            kExtractorChannels[i], 3, 2, 1, false, seed);
    in = kExtractorChannels[i];
  }
}

FeaturePyramid SensitiveExtractor::extract(nn::Context& ctx, const ag::Var& image) const {
  if (image.shape().size() != 3 || image.dim(0) != 3) {
    throw invalid_argument("extract expects a [3,H,W] image, got " + shape_str(image.shape()));
  }
  if (image.dim(1) < kMinInputSize || image.dim(2) < kMinInputSize) {
    throw invalid_argument("input below minimum size (" + std::to_string(kMinInputSize) +
                           "x" + std::to_string(kMinInputSize) + "): " + shape_str(image.shape()));
  }
  FeaturePyramid out;
  ag::Var x = image;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = ag::leaky_relu(ag::instance_norm(blocks_[i].forward(ctx, x), kInstanceNormEps), kLeakySlope);
    out.levels[i] = x;
  }
  return out;
}

double SensitiveExtractor::macs(int height, int width) const {
  double total = 0.0;
  for (const auto& b : blocks_) {
    total += b.macs(height, width);
    height = b.out_size(height);
    width = b.out_size(width);
  }
  return total;
}

std::array<ag::Var, 3> scale_cosines(const FeaturePyramid& original,
                                     const FeaturePyramid& compressed) {
  std::array<ag::Var, 3> out;
  for (std::size_t i = 0; i < 3; ++i) {
    if (original[i].shape() != compressed[i].shape()) {
      throw invalid_argument("feature pyramid mismatch at scale " + std::to_string(i + 1) + ": " +
                             shape_str(original[i].shape()) + " vs " +
                             shape_str(compressed[i].shape()));
    }
    out[i] = ag::cosine_mean(original[i], compressed[i]);
  }
  return out;
}

DistortionScore feature_distortion(const FeaturePyramid& original,
                                   const FeaturePyramid& compressed) {
  const auto cos = scale_cosines(original, compressed);
  DistortionScore score;
  for (std::size_t i = 0; i < 3; ++i) {
    // Rounding can push |cos| a hair past 1.
    score.per_scale[i] = std::clamp(-cos[i].item(), -1.0, 1.0);
  }
  return score;
}

} // namespace cdre::sensitive
