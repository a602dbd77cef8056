#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cdre/autograd.hpp"
#include "cdre/random.hpp"
#include "cdre/tensor.hpp"

namespace cdre::nn {

using ParamId = std::size_t;
inline constexpr ParamId kNoParam = static_cast<ParamId>(-1);

struct Parameter {
  std::string name;  // "<group>.<module>.<field>"
  Tensor value;
  bool trainable = true;
};

// Group of a parameter name: the text before the first '.'.
std::string_view param_group(std::string_view name);

// Owns every parameter of a model. Parameters are addressed by insertion
// index so that a copied store remains usable by copied modules.
class ParamStore {
 public:
  ParamId create(const std::string& name, Shape shape);

  Parameter& at(ParamId id) { return params_.at(id); }
  const Parameter& at(ParamId id) const { return params_.at(id); }
  std::size_t size() const { return params_.size(); }

  ParamId find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != kNoParam; }

  // Scalar count over parameters in the group ("extractor", "embed", ...).
  std::size_t count(std::string_view group) const;
  std::vector<std::string> groups() const;
  std::size_t total_count() const;

  void set_group_trainable(std::string_view group, bool trainable);
  std::uint64_t group_hash(std::string_view group) const;

  // Seeded init keyed by parameter name, so values do not depend on the
  // order in which modules were constructed.
  void init_uniform(ParamId id, double bound, std::uint64_t seed);
  void init_constant(ParamId id, double value);

 private:
  std::vector<Parameter> params_;
  std::map<std::string, ParamId, std::less<>> index_;
};

// One forward pass worth of parameter leaves.
class Context {
 public:
  Context(const ParamStore& store, bool grad_enabled);

  ag::Var param(ParamId id);
  bool grad_enabled() const { return grad_enabled_; }

  // Gradient per parameter id after ag::backward(); empty for parameters
  // that were not used or are frozen.
  std::vector<std::vector<double>> gradients() const;

 private:
  const ParamStore* store_;
  bool grad_enabled_;
  std::vector<ag::Var> leaves_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in_channels,
         int out_channels, int kernel, int stride, int pad, bool bias,
         std::uint64_t seed);

  ag::Var forward(Context& ctx, const ag::Var& x) const;

  int out_size(int in) const { return (in + 2 * pad_ - kernel_) / stride_ + 1; }
  // MACs for one input of the given spatial size.
  double macs(int height, int width) const;
  ParamId weight() const { return weight_; }
  ParamId bias() const { return bias_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  ParamId weight_ = kNoParam;
  ParamId bias_ = kNoParam;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in_features,
         int out_features, bool bias, std::uint64_t seed);

  ag::Var forward(Context& ctx, const ag::Var& x) const;
  double macs(int rows) const { return static_cast<double>(rows) * in_ * out_; }
  ParamId weight() const { return weight_; }
  ParamId bias() const { return bias_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_ = 0, out_ = 0;
  ParamId weight_ = kNoParam;
  ParamId bias_ = kNoParam;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int features);
  ag::Var forward(Context& ctx, const ag::Var& x) const;

 private:
  ParamId gamma_ = kNoParam;
  ParamId beta_ = kNoParam;
};

// Two linear layers with a ReLU between them.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, int in_features,
      int hidden_features, int out_features, std::uint64_t seed);
  ag::Var forward(Context& ctx, const ag::Var& x) const;
  double macs(int rows) const { return fc1_.macs(rows) + fc2_.macs(rows); }
  const Linear& fc1() const { return fc1_; }
  const Linear& fc2() const { return fc2_; }

 private:
  Linear fc1_;
  Linear fc2_;
};

} // namespace cdre::nn
