#include "cdre/model.hpp"

#include "cdre/error.hpp"

namespace cdre::model {

namespace {

ag::Var constant(const Tensor& t) { return ag::Var::constant(t); }

} // namespace

CdreModel::CdreModel(const ModelConfig& config) : config_(config) {
  embedding::validate_depth(config.embedding_depth);
  config.backbone.validate();
  const std::uint64_t seed = config.seed;
  extractor_ = sensitive::SensitiveExtractor(params_, seed);
  distortion::EncoderOptions opts;
  opts.latent_channels = config.latent_channels;
  opts.multi_scale = config.multi_scale;
  opts.fusion = config.modulation ? distortion::Fusion::kModulation : distortion::Fusion::kConcat;
  encoder_ = distortion::DistortionEncoder(params_, opts, seed);
  int decoded_dim = distortion::kDecodedChannels;
  if (config.backbone.family == tasks::Family::kCnn) {
    cnn_decoder_ = distortion::CnnDistortionDecoder(params_, config.latent_channels, seed);
  } else {
    decoded_dim = config.backbone.stage_dims[0];
    token_decoder_ =
        distortion::TokenDistortionDecoder(params_, config.latent_channels, decoded_dim, seed);
  }
  embedding_ = embedding::EmbeddingPipeline(params_, config.backbone, config.embedding_depth,
                                            decoded_dim, seed);
  backbone_ = tasks::Backbone(params_, config.backbone, seed);
}

ag::Var CdreModel::decode_feature(nn::Context& ctx, const ag::Var& bits, int source_h,
                                  int source_w) const {
  if (bits.shape().size() != 3 || bits.dim(0) != config_.latent_channels) {
    throw invalid_argument("bits " + shape_str(bits.shape()) + " do not match latent channels " +
                           std::to_string(config_.latent_channels));
  }
  if (config_.backbone.family == tasks::Family::kCnn) {
    return cnn_decoder_.decode(ctx, bits, source_h, source_w);
  }
  return token_decoder_.decode(ctx, bits);
}

tasks::BackboneOutput CdreModel::forward_with_bits(nn::Context& ctx, const ag::Var& compressed,
                                                   const ag::Var& bits, int source_h,
                                                   int source_w) const {
  const auto decoded = decode_feature(ctx, bits, source_h, source_w);
  embedding::Embedder hook(embedding_, embedding_.transform(ctx, decoded));
  return backbone_.forward(ctx, compressed, &hook);
}

tasks::BackboneOutput CdreModel::forward_plain(nn::Context& ctx, const ag::Var& image) const {
  return backbone_.forward(ctx, image, nullptr);
}

PairForward CdreModel::forward_pair(nn::Context& ctx, const codec::ImagePair& pair) const {
  pair.validate();
  PairForward out;
  const auto x = constant(pair.original);
  const auto x_hat = constant(pair.compressed);
  out.f_original = extractor_.extract(ctx, x);
  out.f_compressed = extractor_.extract(ctx, x_hat);
  out.latent = encoder_.encode(ctx, x, x_hat, out.f_original, out.f_compressed);
  out.bits = distortion::quantize_ste(out.latent);
  out.logits = forward_with_bits(ctx, x_hat, out.bits, pair.height(), pair.width()).logits;
  return out;
}

distortion::CompactRepresentation CdreModel::encode_latent(const codec::ImagePair& pair) const {
  pair.validate();
  nn::Context ctx(params_, false);
  const auto x = constant(pair.original);
  const auto x_hat = constant(pair.compressed);
  const auto fo = extractor_.extract(ctx, x);
  const auto fc = extractor_.extract(ctx, x_hat);
  distortion::CompactRepresentation y;
  y.latent = encoder_.encode(ctx, x, x_hat, fo, fc).value();
  y.source_h = pair.height();
  y.source_w = pair.width();
  return y;
}

distortion::BinaryRepresentation CdreModel::encode_bits(const codec::ImagePair& pair) const {
  return distortion::quantize(encode_latent(pair));
}

Tensor CdreModel::logits_with_bits(const Tensor& compressed,
                                   const distortion::BinaryRepresentation& b) const {
  if (b.channels != config_.latent_channels) {
    throw checkpoint_error("bitstream has " + std::to_string(b.channels) +
                           " channels but the model expects " +
                           std::to_string(config_.latent_channels));
  }
  if (compressed.dim(1) != b.source_h || compressed.dim(2) != b.source_w) {
    throw data_error("bitstream source size " + std::to_string(b.source_h) + "x" +
                     std::to_string(b.source_w) + " does not match image " +
                     shape_str(compressed.shape));
  }
  nn::Context ctx(params_, false);
  return forward_with_bits(ctx, constant(compressed), constant(b.to_tensor()), b.source_h,
                           b.source_w)
      .logits.value();
}

Tensor CdreModel::logits_plain(const Tensor& image) const {
  nn::Context ctx(params_, false);
  return forward_plain(ctx, constant(image)).logits.value();
}

void CdreModel::freeze_downstream(bool frozen) {
  for (const char* g : kDownstreamGroups) params_.set_group_trainable(g, !frozen);
}

} // namespace cdre::model
