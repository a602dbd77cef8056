#include "cdre/distortion_codec.hpp"

#include <cmath>

#include "cdre/bitstream.hpp"
#include "cdre/error.hpp"

namespace cdre::distortion {

namespace {

constexpr double kLeakySlope = 0.01;

void check_rep(const BinaryRepresentation& b) {
  if (b.channels <= 0 || b.latent_h <= 0 || b.latent_w <= 0) {
    throw invalid_argument("binary representation has empty latent dimensions");
  }
  if (b.bits.size() != static_cast<std::size_t>(b.channels) * b.latent_h * b.latent_w) {
    throw invalid_argument("binary representation bit count does not match its dimensions");
  }
  if (b.channels > 255 || b.latent_h > 65535 || b.latent_w > 65535 || b.source_h > 65535 ||
      b.source_w > 65535 || b.source_h < 0 || b.source_w < 0) {
    throw invalid_argument("binary representation dimensions exceed header field widths");
  }
}

[[noreturn]] void malformed(std::size_t offset, const std::string& reason) {
  throw data_error("malformed distortion bitstream at byte " + std::to_string(offset) + ": " +
                   reason);
}

} // namespace

int latent_size(int source) { return (source + kDownsampleFactor - 1) / kDownsampleFactor; }

Tensor BinaryRepresentation::to_tensor() const {
  Tensor t({channels, latent_h, latent_w});
  for (std::size_t i = 0; i < bits.size(); ++i) t.data[i] = bits[i];
  return t;
}

ag::Var modulate(const ag::Var& feature, const ModulationParams& params) {
  if (params.alpha.shape() != feature.shape() || params.beta.shape() != feature.shape()) {
    throw invalid_argument("modulate: parameter shapes " + shape_str(params.alpha.shape()) + "/" +
                           shape_str(params.beta.shape()) + " do not match feature " +
                           shape_str(feature.shape()));
  }
  return ag::add(ag::mul(params.alpha, feature), params.beta);
}

DistortionEncoder::DistortionEncoder(nn::ParamStore& store, const EncoderOptions& options,
                                     std::uint64_t seed)
    : options_(options) {
  if (options.latent_channels <= 0 || options.latent_channels > 255) {
    throw invalid_argument("latent channel count must be in [1, 255]");
  }
  int in = 6;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i] = nn::Conv2d(store, "dist_enc.block" + std::to_string(i + 1) + ".conv", in,
                            kEncoderChannels[i], 3, 2, 1, true, seed);
    in = kEncoderChannels[i];
  }
  head_ = nn::Conv2d(store, "dist_enc.head", in, options.latent_channels, 1, 1, 0, true, seed);

  for (int s = 0; s < conditioned_scales(); ++s) {
    const int cond = 2 * sensitive::kExtractorChannels[s];
    const int width = kEncoderChannels[s];
    const std::string prefix = "modulation.scale" + std::to_string(s + 1);
    if (options.fusion == Fusion::kModulation) {
      alpha_[s] = nn::Conv2d(store, prefix + ".alpha", cond, width, 1, 1, 0, true, seed);
      beta_[s] = nn::Conv2d(store, prefix + ".beta", cond, width, 1, 1, 0, true, seed);
      // Start near the identity modulation (alpha ~ 1, beta ~ 0).
      store.init_uniform(alpha_[s].weight(), 0.05, seed);
      store.init_constant(alpha_[s].bias(), 1.0);
      store.init_uniform(beta_[s].weight(), 0.05, seed);
      store.init_constant(beta_[s].bias(), 0.0);
    } else {
      fuse_[s] = nn::Conv2d(store, prefix + ".fuse", width + cond, width, 1, 1, 0, true, seed);
    }
  }
}

ModulationParams DistortionEncoder::modulation_params(
    nn::Context& ctx, std::size_t scale, const sensitive::FeaturePyramid& f_original,
    const sensitive::FeaturePyramid& f_compressed) const {
  const auto cond = ag::concat_channels({f_original[scale], f_compressed[scale]});
  return {alpha_.at(scale).forward(ctx, cond), beta_.at(scale).forward(ctx, cond)};
}

ag::Var DistortionEncoder::run(nn::Context& ctx, const ag::Var& original,
                               const ag::Var& compressed,
                               const sensitive::FeaturePyramid* f_original,
                               const sensitive::FeaturePyramid* f_compressed,
                               bool identity) const {
  if (original.shape() != compressed.shape() || original.shape().size() != 3 ||
      original.dim(0) != 3) {
    throw invalid_argument("encode_distortion: pair shapes " + shape_str(original.shape()) +
                           " / " + shape_str(compressed.shape()) + " are not matching [3,H,W]");
  }
  ag::Var x = ag::concat_channels({original, compressed});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = ag::leaky_relu(blocks_[i].forward(ctx, x), kLeakySlope);
    if (static_cast<int>(i) >= conditioned_scales()) continue;
    if (identity) {
      x = modulate(x, {ag::Var::constant(Tensor(x.shape(), 1.0)),
                       ag::Var::constant(Tensor(x.shape(), 0.0))});
      continue;
    }
    if (!f_original) continue;
    if ((*f_original)[i].dim(1) != x.dim(1) || (*f_original)[i].dim(2) != x.dim(2) ||
        (*f_compressed)[i].shape() != (*f_original)[i].shape()) {
      throw invalid_argument("encode_distortion: pyramid scale " + std::to_string(i + 1) + " " +
                             shape_str((*f_original)[i].shape()) +
                             " does not match encoder feature " + shape_str(x.shape()));
    }
    if (options_.fusion == Fusion::kModulation) {
      x = modulate(x, modulation_params(ctx, i, *f_original, *f_compressed));
    } else {
      x = fuse_[i].forward(ctx, ag::concat_channels({x, (*f_original)[i], (*f_compressed)[i]}));
    }
  }
  return head_.forward(ctx, x);
}

ag::Var DistortionEncoder::encode(nn::Context& ctx, const ag::Var& original,
                                  const ag::Var& compressed,
                                  const sensitive::FeaturePyramid& f_original,
                                  const sensitive::FeaturePyramid& f_compressed) const {
  return run(ctx, original, compressed, &f_original, &f_compressed, false);
}

ag::Var DistortionEncoder::encode_identity_modulation(nn::Context& ctx, const ag::Var& original,
                                                      const ag::Var& compressed) const {
  return run(ctx, original, compressed, nullptr, nullptr, true);
}

ag::Var DistortionEncoder::encode_unconditioned(nn::Context& ctx, const ag::Var& original,
                                                const ag::Var& compressed) const {
  return run(ctx, original, compressed, nullptr, nullptr, false);
}

double DistortionEncoder::encoder_macs(int height, int width) const {
  double total = 0.0;
  for (const auto& b : blocks_) {
    total += b.macs(height, width);
    height = b.out_size(height);
    width = b.out_size(width);
  }
  return total + head_.macs(height, width);
}

double DistortionEncoder::conditioning_macs(int height, int width) const {
  double total = 0.0;
  for (int s = 0; s < conditioned_scales(); ++s) {
    height = blocks_[s].out_size(height);
    width = blocks_[s].out_size(width);
    if (options_.fusion == Fusion::kModulation) {
      total += alpha_[s].macs(height, width) + beta_[s].macs(height, width);
    } else {
      total += fuse_[s].macs(height, width);
    }
  }
  return total;
}

BinaryRepresentation quantize(const CompactRepresentation& y) {
  if (y.latent.rank() != 3) {
    throw invalid_argument("quantize expects a [C,h,w] latent, got " + shape_str(y.latent.shape));
  }
  if (!all_finite(y.latent.data)) throw invalid_argument("quantize: non-finite latent value");
  BinaryRepresentation b;
  b.channels = y.latent.dim(0);
  b.latent_h = y.latent.dim(1);
  b.latent_w = y.latent.dim(2);
  b.source_h = y.source_h;
  b.source_w = y.source_w;
  b.bits.resize(y.latent.numel());
  for (std::size_t i = 0; i < b.bits.size(); ++i) b.bits[i] = y.latent.data[i] >= 0.0 ? 1 : 0;
  return b;
}

ag::Var quantize_ste(const ag::Var& y) {
  if (!all_finite(y.value().data)) throw invalid_argument("quantize: non-finite latent value");
  return ag::binarize_ste(y);
}

std::vector<std::uint8_t> serialize(const BinaryRepresentation& b) {
  check_rep(b);
  std::vector<std::uint8_t> out(kDistortionMagic, kDistortionMagic + 4);
  out.push_back(kDistortionVersion);
  put_u16_be(out, static_cast<std::uint32_t>(b.source_h));
  put_u16_be(out, static_cast<std::uint32_t>(b.source_w));
  out.push_back(static_cast<std::uint8_t>(b.channels));
  put_u16_be(out, static_cast<std::uint32_t>(b.latent_h));
  put_u16_be(out, static_cast<std::uint32_t>(b.latent_w));
  BitWriter w;
  for (auto bit : b.bits) {
    if (bit > 1) throw invalid_argument("binary representation holds a non-binary value");
    w.put_bit(bit != 0);
  }
  const auto payload = w.finish();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

BinaryRepresentation deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kDistortionHeaderBytes) malformed(bytes.size(), "truncated header");
  for (int i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<std::uint8_t>(kDistortionMagic[i])) malformed(i, "bad magic");
  }
  if (bytes[4] != kDistortionVersion) malformed(4, "unsupported version");
  BinaryRepresentation b;
  b.source_h = static_cast<int>(get_u16_be(bytes, 5));
  b.source_w = static_cast<int>(get_u16_be(bytes, 7));
  b.channels = bytes[9];
  b.latent_h = static_cast<int>(get_u16_be(bytes, 10));
  b.latent_w = static_cast<int>(get_u16_be(bytes, 12));
  if (b.channels == 0) malformed(9, "zero channels");
  if (b.latent_h == 0 || b.latent_w == 0) malformed(10, "zero latent dimension");
  const std::size_t nbits = static_cast<std::size_t>(b.channels) * b.latent_h * b.latent_w;
  const std::size_t payload = (nbits + 7) / 8;
  if (bytes.size() < kDistortionHeaderBytes + payload) malformed(bytes.size(), "truncated payload");
  if (bytes.size() > kDistortionHeaderBytes + payload) {
    malformed(kDistortionHeaderBytes + payload, "trailing bytes after payload");
  }
  BitReader r(bytes.subspan(kDistortionHeaderBytes), kDistortionHeaderBytes,
              "malformed distortion bitstream");
  b.bits.resize(nbits);
  for (auto& bit : b.bits) bit = r.get_bit() ? 1 : 0;
  return b;
}

double side_bpp(int channels, int source_h, int source_w) {
  if (source_h <= 0 || source_w <= 0) throw invalid_argument("side_bpp: zero source dimensions");
  return static_cast<double>(channels) * latent_size(source_h) * latent_size(source_w) /
         (static_cast<double>(source_h) * source_w);
}

double side_bpp(const BinaryRepresentation& b) {
  if (b.source_h <= 0 || b.source_w <= 0) {
    throw invalid_argument("side_bpp: zero source dimensions");
  }
  return static_cast<double>(b.channels) * b.latent_h * b.latent_w /
         (static_cast<double>(b.source_h) * b.source_w);
}

CnnDistortionDecoder::CnnDistortionDecoder(nn::ParamStore& store, int latent_channels,
                                           std::uint64_t seed) {
  int in = latent_channels;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i] = nn::Conv2d(store, "dist_dec.cnn.block" + std::to_string(i + 1) + ".conv", in,
                            kDecoderChannels[i], 3, 1, 1, true, seed);
    in = kDecoderChannels[i];
  }
}

ag::Var CnnDistortionDecoder::decode(nn::Context& ctx, const ag::Var& bits, int source_h,
                                     int source_w) const {
  if (bits.shape().size() != 3) {
    throw invalid_argument("decode_cnn expects [C,h,w] bits, got " + shape_str(bits.shape()));
  }
  if (source_h <= 0 || source_w <= 0 || source_h > bits.dim(1) * kDownsampleFactor ||
      source_w > bits.dim(2) * kDownsampleFactor) {
    throw invalid_argument("decode_cnn: source size inconsistent with latent " +
                           shape_str(bits.shape()));
  }
  ag::Var x = bits;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i].forward(ctx, ag::upsample_nearest2x(x));
    if (i + 1 < blocks_.size()) x = ag::leaky_relu(x, kLeakySlope);
  }
  return ag::crop(x, source_h, source_w);
}

double CnnDistortionDecoder::macs(int latent_h, int latent_w) const {
  double total = 0.0;
  for (const auto& b : blocks_) {
    latent_h *= 2;
    latent_w *= 2;
    total += b.macs(latent_h, latent_w);
  }
  return total;
}

TokenDistortionDecoder::TokenDistortionDecoder(nn::ParamStore& store, int latent_channels,
                                               int token_dim, std::uint64_t seed)
    : token_dim_(token_dim),
      projection_(store, "dist_dec.tok.proj", latent_channels, token_dim, token_dim, seed) {
  if (token_dim <= 0) throw invalid_argument("token_dim must be positive");
}

ag::Var TokenDistortionDecoder::decode(nn::Context& ctx, const ag::Var& bits) const {
  if (bits.shape().size() != 3) {
    throw invalid_argument("decode_transformer expects [C,h,w] bits, got " +
                           shape_str(bits.shape()));
  }
  return projection_.forward(ctx, ag::spatial_to_tokens(bits));
}

double TokenDistortionDecoder::macs(int latent_h, int latent_w) const {
  return projection_.macs(latent_h * latent_w);
}

} // namespace cdre::distortion
