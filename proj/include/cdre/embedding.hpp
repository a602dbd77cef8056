#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cdre/autograd.hpp"
#include "cdre/backbones.hpp"
#include "cdre/nn.hpp"

namespace cdre::embedding {

inline constexpr int kMaxDepth = 4;
inline constexpr int kDefaultDepth = 4;
inline constexpr int kAttentionHeads = 2;

// Transformed distortion features d_1..d_depth, each matched to its stage.
struct EmbeddingFeatureSet {
  tasks::Family variant = tasks::Family::kCnn;
  std::vector<ag::Var> d;
};

// d_i = ReLU(InstanceNorm(Conv(d_{i-1}))); stride 4 into stage 1, 2 after.
class CnnTransform {
 public:
  CnnTransform() = default;
  CnnTransform(nn::ParamStore& store, int stage, int in_channels, int out_channels,
               std::uint64_t seed);
  ag::Var forward(nn::Context& ctx, const ag::Var& d_prev) const;
  double macs(int height, int width) const { return conv_.macs(height, width); }
  int out_size(int in) const { return conv_.out_size(in); }

 private:
  nn::Conv2d conv_;
};

// f' = f + Out(CA(SA(f, d))), CBAM-style gates. Out is a zero-initialized
// 1x1 convolution, so the block starts as the identity on f.
class CnnEmbed {
 public:
  CnnEmbed() = default;
  CnnEmbed(nn::ParamStore& store, int stage, int channels, std::uint64_t seed);

  ag::Var forward(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const;
  // Residual branch only (f' - f).
  ag::Var branch(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const;
  double macs(int height, int width) const;

  const nn::Conv2d& spatial_conv() const { return spatial_; }
  const nn::Linear& ca_fc1() const { return ca_fc1_; }
  const nn::Linear& ca_fc2() const { return ca_fc2_; }
  const nn::Conv2d& out_conv() const { return out_; }

 private:
  int channels_ = 0;
  nn::Conv2d spatial_;
  nn::Linear ca_fc1_, ca_fc2_;
  nn::Conv2d out_;
};

// Per-token MLP with one hidden layer (width 2 * out).
class TokenTransform {
 public:
  TokenTransform() = default;
  TokenTransform(nn::ParamStore& store, int stage, int in_dim, int out_dim, std::uint64_t seed);
  ag::Var forward(nn::Context& ctx, const ag::Var& d_prev) const;
  double macs(int tokens) const { return mlp_.macs(tokens); }
  int in_dim() const { return mlp_.fc1().in_features(); }
  int out_dim() const { return mlp_.fc2().out_features(); }
  const nn::Mlp& mlp() const { return mlp_; }

 private:
  nn::Mlp mlp_;
};

// f' = f + Out(softmax(Q K^T / sqrt(d_head)) V), Q from stage tokens and
// K, V from distortion tokens. Out is zero-initialized.
class TokenEmbed {
 public:
  TokenEmbed() = default;
  TokenEmbed(nn::ParamStore& store, int stage, int dim, std::uint64_t seed);

  ag::Var forward(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const;
  // Attention weights per head, [N_f, N_d] each.
  std::vector<Tensor> attention(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const;
  double macs(int stage_tokens, int distortion_tokens) const;

  const nn::Linear& wq() const { return wq_; }
  const nn::Linear& wk() const { return wk_; }
  const nn::Linear& wv() const { return wv_; }
  const nn::Linear& out() const { return out_; }
  int heads() const { return heads_; }

 private:
  ag::Var attend(nn::Context& ctx, const ag::Var& f, const ag::Var& d,
                 std::vector<Tensor>* weights) const;

  int dim_ = 0;
  int heads_ = kAttentionHeads;
  nn::Linear wq_, wk_, wv_, out_;
};

class EmbeddingPipeline;

// Binds a feature set to a pipeline so a backbone can consult it per stage.
class Embedder : public tasks::StageHook {
 public:
  Embedder(const EmbeddingPipeline& pipeline, EmbeddingFeatureSet features)
      : pipeline_(&pipeline), features_(std::move(features)) {}

  tasks::Family family() const override { return features_.variant; }
  ag::Var apply(nn::Context& ctx, int stage, const ag::Var& feature) const override;
  const EmbeddingFeatureSet& features() const { return features_; }

 private:
  const EmbeddingPipeline* pipeline_;
  EmbeddingFeatureSet features_;
};

// Progressive transform + embed for the first `depth` stages; deeper stages
// run unmodified.
class EmbeddingPipeline {
 public:
  EmbeddingPipeline() = default;
  // decoded_dim: channels of the CNN decoded feature, or the token width of
  // the transformer decoder.
  EmbeddingPipeline(nn::ParamStore& store, const tasks::BackboneSpec& spec, int depth,
                    int decoded_dim, std::uint64_t seed);

  int depth() const { return depth_; }
  tasks::Family family() const { return spec_.family; }

  EmbeddingFeatureSet transform(nn::Context& ctx, const ag::Var& decoded) const;
  ag::Var embed(nn::Context& ctx, int stage, const ag::Var& f, const ag::Var& d) const;

  const CnnEmbed& cnn_embed(int stage) const { return cnn_embeds_.at(stage); }
  const TokenEmbed& token_embed(int stage) const { return token_embeds_.at(stage); }

  // MACs for a source of the given size; distortion_tokens is the latent
  // position count (transformer only).
  double transform_macs(int height, int width, int distortion_tokens) const;
  double embed_macs(int height, int width, int distortion_tokens) const;
  double macs(int height, int width, int distortion_tokens) const {
    return transform_macs(height, width, distortion_tokens) +
           embed_macs(height, width, distortion_tokens);
  }

 private:
  tasks::BackboneSpec spec_;
  int depth_ = kDefaultDepth;
  std::vector<CnnTransform> cnn_transforms_;
  std::vector<CnnEmbed> cnn_embeds_;
  std::vector<TokenTransform> token_transforms_;
  std::vector<TokenEmbed> token_embeds_;
};

void validate_depth(int depth);

} // namespace cdre::embedding
