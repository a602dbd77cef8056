#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdre/autograd.hpp"
#include "cdre/nn.hpp"
#include "cdre/tensor.hpp"

namespace cdre::tasks {

inline constexpr int kNumClasses = 10;
inline constexpr int kImageSize = 64;
inline constexpr int kMinBackboneInput = 32;

enum class Family { kCnn, kTransformer };

std::string family_name(Family f);
Family parse_family(const std::string& name);

struct BackboneSpec {
  Family family = Family::kCnn;
  std::array<int, 4> stage_dims{16, 32, 64, 128};

  static BackboneSpec cnn() { return {Family::kCnn, {16, 32, 64, 128}}; }
  static BackboneSpec transformer() { return {Family::kTransformer, {24, 48, 96, 192}}; }
  static BackboneSpec for_family(Family f) { return f == Family::kCnn ? cnn() : transformer(); }

  // Overall stride of stage i (0-based): 4, 8, 16, 32.
  static int stage_stride(int stage) { return 4 << stage; }
  void validate() const;

  bool operator==(const BackboneSpec&) const = default;
};

// Embedding hook consulted after every stage; returns the (possibly)
// modified stage output.
class StageHook {
 public:
  virtual ~StageHook() = default;
  virtual Family family() const = 0;
  virtual ag::Var apply(nn::Context& ctx, int stage, const ag::Var& feature) const = 0;
};

struct BackboneOutput {
  // CNN: [C_i, H_i, W_i]. Transformer: tokens [N_i, C_i].
  std::array<ag::Var, 4> stages;
  ag::Var logits;  // [10]
};

// Toy 4-stage backbone plus classification head. Parameters live under the
// "backbone" and "head" groups.
class Backbone {
 public:
  Backbone() = default;
  Backbone(nn::ParamStore& store, const BackboneSpec& spec, std::uint64_t seed);

  BackboneOutput forward(nn::Context& ctx, const ag::Var& image,
                         const StageHook* hook = nullptr) const;
  const BackboneSpec& spec() const { return spec_; }

  // Expected stage-output shape for an input of the given size.
  Shape stage_shape(int stage, int height, int width) const;

 private:
  struct AttentionBlock {
    nn::LayerNorm norm1, norm2;
    nn::Linear qkv, proj;
    nn::Mlp mlp;
    int heads = 2;
  };

  ag::Var attention_block(nn::Context& ctx, const AttentionBlock& b, const ag::Var& x) const;

  BackboneSpec spec_;
  // CNN
  nn::Conv2d stem_;
  std::array<nn::Conv2d, 4> down_;
  std::array<nn::Conv2d, 4> refine_;
  // Transformer
  nn::Conv2d patch_embed_;
  std::array<nn::Conv2d, 3> merge_;
  std::array<std::array<AttentionBlock, 2>, 4> blocks_;
  nn::LayerNorm final_norm_;
  // Both
  nn::Linear classifier_;
};

struct SyntheticSample {
  Tensor image;  // [3, 64, 64]
  int label = 0;
  std::uint64_t seed = 0;
};

// Procedural texture classes: five texture kinds times two periods, drawn
// inside a random blob over a smooth background.
SyntheticSample render_sample(std::uint64_t dataset_seed, int index);
std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, int n);

// Softmax cross-entropy.
ag::Var task_loss(const ag::Var& logits, int label);
double task_loss_value(std::span<const double> logits, int label);

int argmax(std::span<const double> logits);
// Top-1 accuracy.
double task_metric(std::span<const int> predictions, std::span<const int> labels);

} // namespace cdre::tasks
