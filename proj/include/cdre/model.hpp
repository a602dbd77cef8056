#pragma once

#include <cstdint>
#include <optional>

#include "cdre/backbones.hpp"
#include "cdre/base_codec.hpp"
#include "cdre/distortion_codec.hpp"
#include "cdre/embedding.hpp"
#include "cdre/nn.hpp"
#include "cdre/sensitive_extractor.hpp"

namespace cdre::model {

struct ModelConfig {
  tasks::BackboneSpec backbone = tasks::BackboneSpec::cnn();
  int latent_channels = distortion::kDefaultLatentChannels;
  int embedding_depth = embedding::kDefaultDepth;
  bool multi_scale = true;
  bool modulation = true;  // false: concatenation fusion (ablation)
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

// Everything one training step needs from a forward pass.
struct PairForward {
  ag::Var logits;
  sensitive::FeaturePyramid f_original;
  sensitive::FeaturePyramid f_compressed;
  ag::Var latent;  // y
  ag::Var bits;    // binarized y (straight-through)
};

// Encoder side (extractor, distortion encoder, conditioning) and consumer
// side (distortion decoder, transforms, embeddings, backbone, head) sharing
// one parameter store.
class CdreModel {
 public:
  explicit CdreModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  const sensitive::SensitiveExtractor& extractor() const { return extractor_; }
  const distortion::DistortionEncoder& encoder() const { return encoder_; }
  const distortion::CnnDistortionDecoder& cnn_decoder() const { return cnn_decoder_; }
  const distortion::TokenDistortionDecoder& token_decoder() const { return token_decoder_; }
  const embedding::EmbeddingPipeline& embedding() const { return embedding_; }
  const tasks::Backbone& backbone() const { return backbone_; }

  // Full training-time pass over one pair.
  PairForward forward_pair(nn::Context& ctx, const codec::ImagePair& pair) const;

  // Consumer side: decode bits, transform, embed while running the backbone
  // on the compressed frame.
  tasks::BackboneOutput forward_with_bits(nn::Context& ctx, const ag::Var& compressed,
                                          const ag::Var& bits, int source_h,
                                          int source_w) const;

  // Backbone alone.
  tasks::BackboneOutput forward_plain(nn::Context& ctx, const ag::Var& image) const;

  // Decoded distortion feature: [8, H, W] or tokens [N, token_dim].
  ag::Var decode_feature(nn::Context& ctx, const ag::Var& bits, int source_h,
                         int source_w) const;

  // Inference helpers (no gradients).
  distortion::CompactRepresentation encode_latent(const codec::ImagePair& pair) const;
  distortion::BinaryRepresentation encode_bits(const codec::ImagePair& pair) const;
  Tensor logits_with_bits(const Tensor& compressed, const distortion::BinaryRepresentation& b) const;
  Tensor logits_plain(const Tensor& image) const;

  void freeze_downstream(bool frozen);

 private:
  ModelConfig config_;
  nn::ParamStore params_;
  sensitive::SensitiveExtractor extractor_;
  distortion::DistortionEncoder encoder_;
  distortion::CnnDistortionDecoder cnn_decoder_;
  distortion::TokenDistortionDecoder token_decoder_;
  embedding::EmbeddingPipeline embedding_;
  tasks::Backbone backbone_;
};

inline const char* kDownstreamGroups[] = {"backbone", "head"};
inline const char* kCdreGroups[] = {"extractor", "dist_enc", "modulation", "dist_dec",
                                    "transform", "embed"};

} // namespace cdre::model
