#include "cdre/embedding.hpp"

#include <algorithm>
#include <cmath>

#include "cdre/error.hpp"

namespace cdre::embedding {

namespace {

constexpr double kNormEps = 1e-5;

std::string stage_prefix(const char* group, int stage) {
  return std::string(group) + ".stage" + std::to_string(stage + 1);
}

void zero_init(nn::ParamStore& store, nn::ParamId w, nn::ParamId b) {
  store.init_constant(w, 0.0);
  if (b != nn::kNoParam) store.init_constant(b, 0.0);
}

} // namespace

void validate_depth(int depth) {
  if (depth < 1 || depth > kMaxDepth) {
    throw invalid_argument("embedding depth must be in [1, 4], got " + std::to_string(depth));
  }
}

CnnTransform::CnnTransform(nn::ParamStore& store, int stage, int in_channels, int out_channels,
                           std::uint64_t seed)
    : conv_(store, stage_prefix("transform", stage) + ".conv", in_channels, out_channels, 3,
            stage == 0 ? 4 : 2, 1, false, seed) {}

ag::Var CnnTransform::forward(nn::Context& ctx, const ag::Var& d_prev) const {
  return ag::relu(ag::instance_norm(conv_.forward(ctx, d_prev), kNormEps));
}

CnnEmbed::CnnEmbed(nn::ParamStore& store, int stage, int channels, std::uint64_t seed)
    : channels_(channels) {
  const auto p = stage_prefix("embed", stage);
  const int hidden = std::max(channels / 4, 4);
  spatial_ = nn::Conv2d(store, p + ".sa.conv", 2, 1, 7, 1, 3, true, seed);
  ca_fc1_ = nn::Linear(store, p + ".ca.fc1", channels, hidden, true, seed);
  ca_fc2_ = nn::Linear(store, p + ".ca.fc2", hidden, channels, true, seed);
  out_ = nn::Conv2d(store, p + ".out", channels, channels, 1, 1, 0, true, seed);
  zero_init(store, out_.weight(), out_.bias());
}

ag::Var CnnEmbed::branch(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const {
  if (f.shape() != d.shape() || f.shape().size() != 3 || f.dim(0) != channels_) {
    throw invalid_argument("embed_cnn: stage feature " + shape_str(f.shape()) +
                           " and distortion feature " + shape_str(d.shape()) + " do not align");
  }
  // Spatial attention over both inputs, gating the distortion feature.
  const auto both = ag::concat_channels({f, d});
  const auto pooled = ag::concat_channels({ag::channel_mean(both), ag::channel_max(both)});
  const auto sa_gate = ag::sigmoid(spatial_.forward(ctx, pooled));
  const auto sa = ag::mul_spatial(d, sa_gate);
  // Channel attention on the spatially gated result.
  const auto squeezed = ag::reshape(ag::global_avg_pool(sa), {1, channels_});
  const auto ca_gate = ag::sigmoid(ca_fc2_.forward(ctx, ag::relu(ca_fc1_.forward(ctx, squeezed))));
  const auto ca = ag::mul_channel(sa, ca_gate);
  return out_.forward(ctx, ca);
}

ag::Var CnnEmbed::forward(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const {
  return ag::add(f, branch(ctx, f, d));
}

double CnnEmbed::macs(int height, int width) const {
  return spatial_.macs(height, width) + ca_fc1_.macs(1) + ca_fc2_.macs(1) +
         out_.macs(height, width);
}

TokenTransform::TokenTransform(nn::ParamStore& store, int stage, int in_dim, int out_dim,
                               std::uint64_t seed)
    : mlp_(store, stage_prefix("transform", stage) + ".mlp", in_dim, 2 * out_dim, out_dim, seed) {}

ag::Var TokenTransform::forward(nn::Context& ctx, const ag::Var& d_prev) const {
  if (d_prev.shape().size() != 2 || d_prev.dim(1) != in_dim()) {
    throw invalid_argument("transform_transformer: expected [N," + std::to_string(in_dim()) +
                           "] tokens, got " + shape_str(d_prev.shape()));
  }
  return mlp_.forward(ctx, d_prev);
}

TokenEmbed::TokenEmbed(nn::ParamStore& store, int stage, int dim, std::uint64_t seed)
    : dim_(dim) {
  if (dim % heads_ != 0) {
    throw invalid_argument("token dim " + std::to_string(dim) + " not divisible by head count");
  }
  const auto p = stage_prefix("embed", stage);
  wq_ = nn::Linear(store, p + ".q", dim, dim, false, seed);
  wk_ = nn::Linear(store, p + ".k", dim, dim, false, seed);
  wv_ = nn::Linear(store, p + ".v", dim, dim, false, seed);
  out_ = nn::Linear(store, p + ".out", dim, dim, true, seed);
  zero_init(store, out_.weight(), out_.bias());
}

ag::Var TokenEmbed::attend(nn::Context& ctx, const ag::Var& f, const ag::Var& d,
                           std::vector<Tensor>* weights) const {
  if (f.shape().size() != 2 || d.shape().size() != 2 || f.dim(1) != dim_ || d.dim(1) != dim_) {
    throw invalid_argument("embed_transformer: stage tokens " + shape_str(f.shape()) +
                           " and distortion tokens " + shape_str(d.shape()) +
                           " must both have width " + std::to_string(dim_));
  }
  const auto q = wq_.forward(ctx, f);
  const auto k = wk_.forward(ctx, d);
  const auto v = wv_.forward(ctx, d);
  const int dh = dim_ / heads_;
  std::vector<ag::Var> outs;
  for (int h = 0; h < heads_; ++h) {
    const auto qh = ag::slice_cols(q, h * dh, dh);
    const auto kh = ag::slice_cols(k, h * dh, dh);
    const auto vh = ag::slice_cols(v, h * dh, dh);
    const auto att = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt(dh)));
    if (weights) weights->push_back(att.value());
    outs.push_back(ag::matmul(att, vh));
  }
  return out_.forward(ctx, ag::concat_cols(outs));
}

ag::Var TokenEmbed::forward(nn::Context& ctx, const ag::Var& f, const ag::Var& d) const {
  return ag::add(f, attend(ctx, f, d, nullptr));
}

std::vector<Tensor> TokenEmbed::attention(nn::Context& ctx, const ag::Var& f,
                                          const ag::Var& d) const {
  std::vector<Tensor> w;
  attend(ctx, f, d, &w);
  return w;
}

double TokenEmbed::macs(int stage_tokens, int distortion_tokens) const {
  return wq_.macs(stage_tokens) + wk_.macs(distortion_tokens) + wv_.macs(distortion_tokens) +
         2.0 * stage_tokens * distortion_tokens * dim_ + out_.macs(stage_tokens);
}

ag::Var Embedder::apply(nn::Context& ctx, int stage, const ag::Var& feature) const {
  if (stage >= static_cast<int>(features_.d.size())) return feature;
  return pipeline_->embed(ctx, stage, feature, features_.d[stage]);
}

EmbeddingPipeline::EmbeddingPipeline(nn::ParamStore& store, const tasks::BackboneSpec& spec,
                                     int depth, int decoded_dim, std::uint64_t seed)
    : spec_(spec), depth_(depth) {
  validate_depth(depth);
  spec.validate();
  int in = decoded_dim;
  for (int s = 0; s < depth; ++s) {
    const int c = spec.stage_dims[s];
    if (spec.family == tasks::Family::kCnn) {
      cnn_transforms_.emplace_back(store, s, in, c, seed);
      cnn_embeds_.emplace_back(store, s, c, seed);
    } else {
      token_transforms_.emplace_back(store, s, in, c, seed);
      token_embeds_.emplace_back(store, s, c, seed);
    }
    in = c;
  }
}

EmbeddingFeatureSet EmbeddingPipeline::transform(nn::Context& ctx, const ag::Var& decoded) const {
  EmbeddingFeatureSet set;
  set.variant = spec_.family;
  ag::Var d = decoded;
  for (int s = 0; s < depth_; ++s) {
    if (spec_.family == tasks::Family::kCnn) {
      if (d.shape().size() != 3) {
        throw invalid_argument("transform_cnn expects a spatial feature, got " +
                               shape_str(d.shape()));
      }
      d = cnn_transforms_[s].forward(ctx, d);
    } else {
      d = token_transforms_[s].forward(ctx, d);
    }
    set.d.push_back(d);
  }
  return set;
}

ag::Var EmbeddingPipeline::embed(nn::Context& ctx, int stage, const ag::Var& f,
                                 const ag::Var& d) const {
  if (stage < 0 || stage >= depth_) {
    throw invalid_argument("stage " + std::to_string(stage + 1) + " has no embedding");
  }
  if (spec_.family == tasks::Family::kCnn) return cnn_embeds_[stage].forward(ctx, f, d);
  return token_embeds_[stage].forward(ctx, f, d);
}

double EmbeddingPipeline::transform_macs(int height, int width, int distortion_tokens) const {
  double total = 0.0;
  int h = height, w = width;
  for (int s = 0; s < depth_; ++s) {
    if (spec_.family == tasks::Family::kCnn) {
      total += cnn_transforms_[s].macs(h, w);
      h = cnn_transforms_[s].out_size(h);
      w = cnn_transforms_[s].out_size(w);
    } else {
      total += token_transforms_[s].macs(distortion_tokens);
    }
  }
  return total;
}

double EmbeddingPipeline::embed_macs(int height, int width, int distortion_tokens) const {
  double total = 0.0;
  if (spec_.family == tasks::Family::kCnn) {
    int h = height, w = width;
    for (int s = 0; s < depth_; ++s) {
      h = cnn_transforms_[s].out_size(h);
      w = cnn_transforms_[s].out_size(w);
      total += cnn_embeds_[s].macs(h, w);
    }
  } else {
    int h = height / 4, w = width / 4;
    for (int s = 0; s < depth_; ++s) {
      total += token_embeds_[s].macs(h * w, distortion_tokens);
      h /= 2;
      w /= 2;
    }
  }
  return total;
}

} // namespace cdre::embedding
