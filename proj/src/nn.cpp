#include "cdre/nn.hpp"

#include <cmath>
#include <set>

#include "cdre/error.hpp"

namespace cdre::nn {

std::string_view param_group(std::string_view name) {
  const auto dot = name.find('.');
  return dot == std::string_view::npos ? name : name.substr(0, dot);
}

ParamId ParamStore::create(const std::string& name, Shape shape) {
  if (index_.count(name)) throw invalid_argument("duplicate parameter " + name);
  const ParamId id = params_.size();
  params_.push_back(Parameter{name, Tensor(std::move(shape)), true});
  index_.emplace(name, id);
  return id;
}

ParamId ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? kNoParam : it->second;
}

std::size_t ParamStore::count(std::string_view group) const {
  std::size_t n = 0;
  bool found = false;
  for (const auto& p : params_) {
    if (param_group(p.name) == group) {
      n += p.value.numel();
      found = true;
    }
  }
  if (!found) throw invalid_argument("unknown parameter group '" + std::string(group) + "'");
  return n;
}

std::vector<std::string> ParamStore::groups() const {
  std::vector<std::string> out;
  std::set<std::string, std::less<>> seen;
  for (const auto& p : params_) {
    const auto g = param_group(p.name);
    if (seen.insert(std::string(g)).second) out.emplace_back(g);
  }
  return out;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParamStore::set_group_trainable(std::string_view group, bool trainable) {
  for (auto& p : params_) {
    if (param_group(p.name) == group) p.trainable = trainable;
  }
}

std::uint64_t ParamStore::group_hash(std::string_view group) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params_) {
    if (param_group(p.name) == group) h = hash_values(p.value.data, h);
  }
  return h;
}

void ParamStore::init_uniform(ParamId id, double bound, std::uint64_t seed) {
  Parameter& p = at(id);
  Rng rng(mix_seed(seed, hash_string(p.name)));
  for (double& v : p.value.data) v = rng.uniform(-bound, bound);
}

void ParamStore::init_constant(ParamId id, double value) {
  for (double& v : at(id).value.data) v = value;
}

Context::Context(const ParamStore& store, bool grad_enabled)
    : store_(&store), grad_enabled_(grad_enabled), leaves_(store.size()) {}

ag::Var Context::param(ParamId id) {
  if (id == kNoParam) return {};
  if (!leaves_.at(id).defined()) {
    const Parameter& p = store_->at(id);
    leaves_[id] = ag::Var::leaf(p.value, grad_enabled_ && p.trainable);
  }
  return leaves_[id];
}

std::vector<std::vector<double>> Context::gradients() const {
  std::vector<std::vector<double>> out(leaves_.size());
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    if (leaves_[i].defined() && leaves_[i].requires_grad()) out[i] = leaves_[i].grad();
  }
  return out;
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in_channels,
               int out_channels, int kernel, int stride, int pad, bool bias,
               std::uint64_t seed)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
  weight_ = store.create(name + ".weight", {out_channels, in_channels, kernel, kernel});
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  store.init_uniform(weight_, std::sqrt(6.0 / fan_in), seed);
  if (bias) {
    bias_ = store.create(name + ".bias", {out_channels});
    store.init_uniform(bias_, 1.0 / std::sqrt(fan_in), seed);
  }
}

ag::Var Conv2d::forward(Context& ctx, const ag::Var& x) const {
  return ag::conv2d(x, ctx.param(weight_), ctx.param(bias_), stride_, pad_);
}

double Conv2d::macs(int height, int width) const {
  return static_cast<double>(out_) * in_ * kernel_ * kernel_ * out_size(height) *
         out_size(width);
}

Linear::Linear(ParamStore& store, const std::string& name, int in_features,
               int out_features, bool bias, std::uint64_t seed)
    : in_(in_features), out_(out_features) {
  weight_ = store.create(name + ".weight", {out_features, in_features});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  store.init_uniform(weight_, std::sqrt(3.0) * bound, seed);
  if (bias) {
    bias_ = store.create(name + ".bias", {out_features});
    store.init_uniform(bias_, bound, seed);
  }
}

ag::Var Linear::forward(Context& ctx, const ag::Var& x) const {
  return ag::linear(x, ctx.param(weight_), ctx.param(bias_));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int features) {
  gamma_ = store.create(name + ".gamma", {features});
  beta_ = store.create(name + ".beta", {features});
  store.init_constant(gamma_, 1.0);
}

ag::Var LayerNorm::forward(Context& ctx, const ag::Var& x) const {
  return ag::layer_norm(x, ctx.param(gamma_), ctx.param(beta_), 1e-5);
}

Mlp::Mlp(ParamStore& store, const std::string& name, int in_features,
         int hidden_features, int out_features, std::uint64_t seed)
    : fc1_(store, name + ".fc1", in_features, hidden_features, true, seed),
      fc2_(store, name + ".fc2", hidden_features, out_features, true, seed) {}

ag::Var Mlp::forward(Context& ctx, const ag::Var& x) const {
  return fc2_.forward(ctx, ag::relu(fc1_.forward(ctx, x)));
}

} // namespace cdre::nn
