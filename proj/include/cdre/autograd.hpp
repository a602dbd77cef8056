#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cdre/tensor.hpp"

namespace cdre::ag {

struct Node {
  Tensor value;
  // Empty until a gradient reaches this node.
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  std::vector<double>& grad_buffer();
};

// Handle to a value in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad);

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int dim(std::size_t i) const { return node_->value.shape.at(i); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  // Gradient accumulated by backward(); zeros if none arrived.
  std::vector<double> grad() const;

  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar root.
void backward(const Var& root);

// Multiply-accumulates performed by conv2d/linear/matmul on this thread.
std::uint64_t mac_counter();
void reset_mac_counter();

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double negative_slope);
Var sigmoid(const Var& a);

// Forward: 1 where a >= 0 (sigmoid(a) >= 0.5), else 0.
// Backward: straight-through the rounding, so d/da = sigmoid'(a).
Var binarize_ste(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);

// Spatial ops on [C, H, W].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride,
           int pad);
Var upsample_nearest2x(const Var& x);
Var crop(const Var& x, int height, int width);
Var instance_norm(const Var& x, double eps);
Var concat_channels(const std::vector<Var>& parts);
Var channel_mean(const Var& x);
Var channel_max(const Var& x);
Var global_avg_pool(const Var& x);
Var mul_channel(const Var& x, const Var& gate);
Var mul_spatial(const Var& x, const Var& gate);

// Token ops on [N, C].
Var linear(const Var& x, const Var& weight, const Var& bias);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var softmax_rows(const Var& x);
Var slice_cols(const Var& x, int start, int count);
Var concat_cols(const std::vector<Var>& parts);
Var mean_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var spatial_to_tokens(const Var& x);
Var tokens_to_spatial(const Var& t, int height, int width);

// Losses.
Var cross_entropy(const Var& logits, int label);

// Mean over spatial locations of the channel-vector cosine similarity
// between two [C, H, W] tensors. Norms are clamped below by eps.
Var cosine_mean(const Var& a, const Var& b, double eps = 1e-8);

} // namespace cdre::ag
