#include "cdre/backbones.hpp"

#include <algorithm>
#include <cmath>

#include "cdre/error.hpp"
#include "cdre/image_io.hpp"
#include "cdre/random.hpp"

namespace cdre::tasks {

std::string family_name(Family f) { return f == Family::kCnn ? "cnn" : "transformer"; }

Family parse_family(const std::string& name) {
  if (name == "cnn") return Family::kCnn;
  if (name == "transformer") return Family::kTransformer;
  throw invalid_argument("unknown backbone family '" + name + "' (expected cnn|transformer)");
}

void BackboneSpec::validate() const {
  for (std::size_t i = 0; i < stage_dims.size(); ++i) {
    if (stage_dims[i] <= 0) throw invalid_argument("backbone stage dims must be positive");
    if (i > 0 && stage_dims[i] < stage_dims[i - 1]) {
      throw invalid_argument("backbone stage dims must be nondecreasing");
    }
  }
}

Backbone::Backbone(nn::ParamStore& store, const BackboneSpec& spec, std::uint64_t seed)
    : spec_(spec) {
  spec.validate();
  const auto& d = spec.stage_dims;
  if (spec.family == Family::kCnn) {
    stem_ = nn::Conv2d(store, "backbone.stem", 3, d[0], 3, 2, 1, true, seed);
    int in = d[0];
    for (int s = 0; s < 4; ++s) {
      const std::string p = "backbone.stage" + std::to_string(s + 1);
      down_[s] = nn::Conv2d(store, p + ".down", in, d[s], 3, 2, 1, true, seed);
      refine_[s] = nn::Conv2d(store, p + ".refine", d[s], d[s], 3, 1, 1, true, seed);
      in = d[s];
    }
  } else {
    patch_embed_ = nn::Conv2d(store, "backbone.patch_embed", 3, d[0], 4, 4, 0, true, seed);
    for (int s = 0; s < 4; ++s) {
      for (int b = 0; b < 2; ++b) {
        const std::string p =
            "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        auto& blk = blocks_[s][b];
        blk.norm1 = nn::LayerNorm(store, p + ".norm1", d[s]);
        blk.qkv = nn::Linear(store, p + ".qkv", d[s], 3 * d[s], true, seed);
        blk.proj = nn::Linear(store, p + ".proj", d[s], d[s], true, seed);
        blk.norm2 = nn::LayerNorm(store, p + ".norm2", d[s]);
        blk.mlp = nn::Mlp(store, p + ".mlp", d[s], 2 * d[s], d[s], seed);
      }
      if (s < 3) {
        merge_[s] = nn::Conv2d(store, "backbone.merge" + std::to_string(s + 1), d[s], d[s + 1],
                               2, 2, 0, true, seed);
      }
    }
    final_norm_ = nn::LayerNorm(store, "backbone.final_norm", d[3]);
  }
  classifier_ = nn::Linear(store, "head.classifier", d[3], kNumClasses, true, seed);
}

ag::Var Backbone::attention_block(nn::Context& ctx, const AttentionBlock& b,
                                  const ag::Var& x) const {
  const int C = x.dim(1);
  const int dh = C / b.heads;
  const ag::Var qkv = b.qkv.forward(ctx, b.norm1.forward(ctx, x));
  std::vector<ag::Var> heads;
  for (int h = 0; h < b.heads; ++h) {
    const auto q = ag::slice_cols(qkv, h * dh, dh);
    const auto k = ag::slice_cols(qkv, C + h * dh, dh);
    const auto v = ag::slice_cols(qkv, 2 * C + h * dh, dh);
    const auto att = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), 1.0 / std::sqrt(dh)));
    heads.push_back(ag::matmul(att, v));
  }
  ag::Var y = ag::add(x, b.proj.forward(ctx, ag::concat_cols(heads)));
  return ag::add(y, b.mlp.forward(ctx, b.norm2.forward(ctx, y)));
}

BackboneOutput Backbone::forward(nn::Context& ctx, const ag::Var& image,
                                 const StageHook* hook) const {
  if (image.shape().size() != 3 || image.dim(0) != 3) {
    throw invalid_argument("backbone expects a [3,H,W] image, got " + shape_str(image.shape()));
  }
  if (image.dim(1) < kMinBackboneInput || image.dim(2) < kMinBackboneInput) {
    throw invalid_argument("backbone input must be at least 32x32, got " +
                           shape_str(image.shape()));
  }
  if (hook && hook->family() != spec_.family) {
    throw invalid_argument("embedding variant " + family_name(hook->family()) +
                           " does not match backbone family " + family_name(spec_.family));
  }
  BackboneOutput out;
  if (spec_.family == Family::kCnn) {
    ag::Var x = ag::relu(stem_.forward(ctx, image));
    for (int s = 0; s < 4; ++s) {
      x = ag::relu(down_[s].forward(ctx, x));
      x = ag::relu(ag::add(x, refine_[s].forward(ctx, x)));
      if (hook) x = hook->apply(ctx, s, x);
      out.stages[s] = x;
    }
    out.logits = classifier_.forward(ctx, ag::reshape(ag::global_avg_pool(x), {1, x.dim(0)}));
  } else {
    ag::Var grid = patch_embed_.forward(ctx, image);
    int h = grid.dim(1), w = grid.dim(2);
    ag::Var x = ag::spatial_to_tokens(grid);
    for (int s = 0; s < 4; ++s) {
      for (const auto& blk : blocks_[s]) x = attention_block(ctx, blk, x);
      if (hook) x = hook->apply(ctx, s, x);
      out.stages[s] = x;
      if (s < 3) {
        grid = merge_[s].forward(ctx, ag::tokens_to_spatial(x, h, w));
        h = grid.dim(1);
        w = grid.dim(2);
        x = ag::spatial_to_tokens(grid);
      }
    }
    out.logits = classifier_.forward(ctx, ag::mean_rows(final_norm_.forward(ctx, x)));
  }
  out.logits = ag::reshape(out.logits, {kNumClasses});
  return out;
}

Shape Backbone::stage_shape(int stage, int height, int width) const {
  const int c = spec_.stage_dims.at(stage);
  if (spec_.family == Family::kCnn) {
    auto ceil_div = [](int v, int d) { return (v + d - 1) / d; };
    int h = ceil_div(height, 2), w = ceil_div(width, 2);
    for (int s = 0; s <= stage; ++s) {
      h = ceil_div(h, 2);
      w = ceil_div(w, 2);
    }
    return {c, h, w};
  }
  int h = height / 4, w = width / 4;
  for (int s = 0; s < stage; ++s) {
    h /= 2;
    w /= 2;
  }
  return {h * w, c};
}

// ---------------------------------------------------------------------------
// Synthetic dataset

namespace {

bool texture_on(int kind, int half_period, int x, int y) {
  const int cx = (x / half_period) % 2, cy = (y / half_period) % 2;
  switch (kind) {
    case 0: return cy == 1;             // horizontal stripes
    case 1: return cx == 1;             // vertical stripes
    case 2: return (cx ^ cy) == 1;      // checkerboard
    case 3: return cx == 1 && cy == 1;  // dots
    default: return cx == 1 || cy == 1; // plaid
  }
}

} // namespace

SyntheticSample render_sample(std::uint64_t dataset_seed, int index) {
  SyntheticSample s;
  s.seed = mix_seed(dataset_seed, static_cast<std::uint64_t>(index));
  s.label = index % kNumClasses;
  Rng rng(s.seed);

  const int kind = s.label % 5;
  const int half_period = s.label < 5 ? 1 : 2;
  const int ox = rng.uniform_int(2 * half_period), oy = rng.uniform_int(2 * half_period);
  const double amp = rng.uniform(0.05, 0.22);

  std::array<double, 3> bg0{}, bg1{}, fg{};
  for (int c = 0; c < 3; ++c) {
    bg0[c] = rng.uniform(0.2, 0.8);
    bg1[c] = rng.uniform(0.2, 0.8);
    fg[c] = rng.uniform(0.25, 0.75);
  }
  const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double cx = rng.uniform(22.0, 42.0), cy = rng.uniform(22.0, 42.0);
  const double rx = rng.uniform(13.0, 22.0), ry = rng.uniform(13.0, 22.0);

  const int n = kImageSize;
  s.image = Tensor({3, n, n});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double t = 0.5 + ((x - n / 2.0) * std::cos(angle) + (y - n / 2.0) * std::sin(angle)) / n;
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      const bool inside = dx * dx + dy * dy <= 1.0;
      const double tex = texture_on(kind, half_period, x + ox, y + oy) ? amp : -amp;
      for (int c = 0; c < 3; ++c) {
        double v = bg0[c] * (1.0 - t) + bg1[c] * t;
        if (inside) v = fg[c] + tex;
        v += 0.015 * rng.normal();
        s.image.at(c, y, x) = v;
      }
    }
  }
  s.image = quantize_8bit(s.image);
  return s;
}

std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, int n) {
  if (n <= 0) throw invalid_argument("dataset size must be positive");
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(render_sample(seed, i));
  return out;
}

ag::Var task_loss(const ag::Var& logits, int label) { return ag::cross_entropy(logits, label); }

double task_loss_value(std::span<const double> logits, int label) {
  Tensor t({static_cast<int>(logits.size())}, std::vector<double>(logits.begin(), logits.end()));
  return ag::cross_entropy(ag::Var::constant(std::move(t)), label).item();
}

int argmax(std::span<const double> logits) {
  if (logits.empty()) throw invalid_argument("argmax of empty logits");
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double task_metric(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw invalid_argument("task_metric: prediction/label count mismatch");
  }
  if (predictions.empty()) throw invalid_argument("task_metric: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

} // namespace cdre::tasks
