#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cdre/autograd.hpp"
#include "cdre/nn.hpp"
#include "cdre/sensitive_extractor.hpp"

namespace cdre::distortion {

inline constexpr int kDefaultLatentChannels = 6;
inline constexpr int kDownsampleFactor = 32;
inline constexpr std::array<int, 5> kEncoderChannels{8, 12, 16, 16, 16};
// Decoder block outputs; the last one is the CNN distortion feature width.
inline constexpr std::array<int, 5> kDecoderChannels{16, 16, 16, 12, 8};
inline constexpr int kDecodedChannels = 8;

int latent_size(int source);

// Real-valued latent y before binarization.
struct CompactRepresentation {
  Tensor latent;  // [C_y, ceil(H/32), ceil(W/32)]
  int source_h = 0;
  int source_w = 0;
};

// Binarized latent with the true source dimensions it was computed from.
struct BinaryRepresentation {
  int channels = 0;
  int latent_h = 0;
  int latent_w = 0;
  int source_h = 0;
  int source_w = 0;
  std::vector<std::uint8_t> bits;  // channel-major then row-major, each 0/1

  std::size_t bit_count() const { return bits.size(); }
  std::uint8_t at(int c, int y, int x) const {
    return bits[(static_cast<std::size_t>(c) * latent_h + y) * latent_w + x];
  }
  Tensor to_tensor() const;
  bool operator==(const BinaryRepresentation&) const = default;
};

struct ModulationParams {
  ag::Var alpha;
  ag::Var beta;
};

// alpha * F + beta, elementwise.
ag::Var modulate(const ag::Var& feature, const ModulationParams& params);

// How extractor features condition the encoder blocks.
enum class Fusion {
  kModulation,
  // Ablation: concatenate and fuse with a 1x1 convolution.
  kConcat,
};

struct EncoderOptions {
  int latent_channels = kDefaultLatentChannels;
  // Conditioning on all three extractor scales, or on scale 1 only.
  bool multi_scale = true;
  Fusion fusion = Fusion::kModulation;
};

class DistortionEncoder {
 public:
  DistortionEncoder() = default;
  DistortionEncoder(nn::ParamStore& store, const EncoderOptions& options, std::uint64_t seed);

  // Conditioned encoder: x and x_hat concatenated, five stride-2 blocks,
  // blocks 1-3 conditioned on the extractor features, 1x1 head to C_y.
  ag::Var encode(nn::Context& ctx, const ag::Var& original, const ag::Var& compressed,
                 const sensitive::FeaturePyramid& f_original,
                 const sensitive::FeaturePyramid& f_compressed) const;

  // Same pipeline with every modulation forced to alpha = 1, beta = 0.
  ag::Var encode_identity_modulation(nn::Context& ctx, const ag::Var& original,
                                     const ag::Var& compressed) const;

  // Encoder blocks only, no conditioning at all.
  ag::Var encode_unconditioned(nn::Context& ctx, const ag::Var& original,
                               const ag::Var& compressed) const;

  ModulationParams modulation_params(nn::Context& ctx, std::size_t scale,
                                     const sensitive::FeaturePyramid& f_original,
                                     const sensitive::FeaturePyramid& f_compressed) const;

  const EncoderOptions& options() const { return options_; }
  int conditioned_scales() const { return options_.multi_scale ? 3 : 1; }

  // Encoder convolutions plus conditioning convolutions, one pair.
  double encoder_macs(int height, int width) const;
  double conditioning_macs(int height, int width) const;

 private:
  ag::Var run(nn::Context& ctx, const ag::Var& original, const ag::Var& compressed,
              const sensitive::FeaturePyramid* f_original,
              const sensitive::FeaturePyramid* f_compressed, bool identity) const;

  EncoderOptions options_;
  std::array<nn::Conv2d, 5> blocks_;
  nn::Conv2d head_;
  std::array<nn::Conv2d, 3> alpha_;
  std::array<nn::Conv2d, 3> beta_;
  std::array<nn::Conv2d, 3> fuse_;
};

// Binarization: bit = 1 iff sigmoid(y) >= 0.5, i.e. iff y >= 0.
BinaryRepresentation quantize(const CompactRepresentation& y);
// Training path: binarized values with a straight-through gradient.
ag::Var quantize_ste(const ag::Var& y);

inline constexpr char kDistortionMagic[4] = {'C', 'D', 'R', 'D'};
inline constexpr std::uint8_t kDistortionVersion = 1;
inline constexpr std::size_t kDistortionHeaderBytes = 14;

// "CDRD", u8 version, u16 source_h, u16 source_w, u8 channels, u16 latent_h,
// u16 latent_w (big-endian), then bits MSB-first, zero-padded to a byte.
std::vector<std::uint8_t> serialize(const BinaryRepresentation& b);
BinaryRepresentation deserialize(std::span<const std::uint8_t> bytes);

// Payload bits per source pixel; the fixed header is not included.
double side_bpp(const BinaryRepresentation& b);
double side_bpp(int channels, int source_h, int source_w);

// Consumer side, CNN backbones: [C_y, h, w] bits -> [8, source_h, source_w].
class CnnDistortionDecoder {
 public:
  CnnDistortionDecoder() = default;
  CnnDistortionDecoder(nn::ParamStore& store, int latent_channels, std::uint64_t seed);

  ag::Var decode(nn::Context& ctx, const ag::Var& bits, int source_h, int source_w) const;
  double macs(int latent_h, int latent_w) const;

 private:
  std::array<nn::Conv2d, 5> blocks_;
};

// Consumer side, transformer backbones: one token per latent position,
// projected pointwise from C_y to the token width.
class TokenDistortionDecoder {
 public:
  TokenDistortionDecoder() = default;
  TokenDistortionDecoder(nn::ParamStore& store, int latent_channels, int token_dim,
                         std::uint64_t seed);

  ag::Var decode(nn::Context& ctx, const ag::Var& bits) const;
  int token_dim() const { return token_dim_; }
  double macs(int latent_h, int latent_w) const;

 private:
  int token_dim_ = 0;
  nn::Mlp projection_;
};

} // namespace cdre::distortion
