#include "cdre/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cdre/error.hpp"
#include "cdre/random.hpp"

namespace cdre::training {

using nlohmann::json;

std::string regime_name(Regime r) { return r == Regime::kFd ? "fd" : "joint"; }

Regime parse_regime(const std::string& name) {
  if (name == "fd") return Regime::kFd;
  if (name == "joint") return Regime::kJoint;
  throw invalid_argument("unknown regime '" + name + "' (expected fd|joint)");
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw invalid_argument("lambda must be >= 0");
  if (steps <= 0) throw invalid_argument("steps must be positive");
  if (!(lr > 0.0) || !(backbone_lr > 0.0)) throw invalid_argument("learning rates must be positive");
  if (batch_size <= 0) throw invalid_argument("batch size must be positive");
  if (qualities.empty()) throw invalid_argument("training needs at least one quality");
  for (int q : qualities) (void)codec::CodecQuality(q);
}

LossBreakdown cdre_loss(double task, const sensitive::FeaturePyramid& f_original,
                        const sensitive::FeaturePyramid& f_compressed, double lambda) {
  if (!(lambda >= 0.0)) throw invalid_argument("lambda must be >= 0");
  const auto cos = sensitive::scale_cosines(f_original, f_compressed);
  LossBreakdown out;
  out.task = task;
  out.total = task;
  for (int i = 0; i < 3; ++i) {
    out.distortion_reg[i] = std::clamp(1.0 + cos[i].item(), 0.0, 2.0);
    out.total += lambda * out.distortion_reg[i];
  }
  return out;
}

ag::Var distortion_regularizer(const sensitive::FeaturePyramid& f_original,
                               const sensitive::FeaturePyramid& f_compressed, int scales) {
  if (scales < 1 || scales > 3) throw invalid_argument("regularizer scales must be in [1, 3]");
  const auto cos = sensitive::scale_cosines(f_original, f_compressed);
  ag::Var reg = ag::add_scalar(cos[0], 1.0);
  for (int i = 1; i < scales; ++i) reg = ag::add(reg, ag::add_scalar(cos[i], 1.0));
  return reg;
}

TrainingData::TrainingData(std::vector<tasks::SyntheticSample> samples, std::vector<int> qualities)
    : samples_(std::move(samples)), qualities_(std::move(qualities)) {
  pairs_.reserve(samples_.size());
  for (const auto& s : samples_) {
    std::vector<codec::ImagePair> row;
    row.reserve(qualities_.size());
    for (int q : qualities_) row.push_back(codec::compress(s.image, codec::CodecQuality(q)));
    pairs_.push_back(std::move(row));
  }
}

const codec::ImagePair& TrainingData::pair(std::size_t i, std::size_t quality_index) const {
  return pairs_.at(i).at(quality_index);
}

void Adam::step(nn::ParamStore& store, const std::vector<std::vector<double>>& grads,
                const std::vector<double>& lr_by_param) {
  const std::size_t n = store.size();
  state_.m.resize(n);
  state_.v.resize(n);
  ++state_.t;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state_.t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state_.t));
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= grads.size() || grads[i].empty() || lr_by_param.at(i) <= 0.0) continue;
    auto& p = store.at(i);
    if (!p.trainable) continue;
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    if (m.empty()) {
      m.assign(p.value.data.size(), 0.0);
      v.assign(p.value.data.size(), 0.0);
    }
    const double lr = lr_by_param[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double g = grads[i][k];
      m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g;
      v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g * g;
      p.value.data[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + kEps);
    }
  }
}

void check_components(const model::CdreModel& model, const TrainingData& data) {
  std::vector<std::string> missing;
  const auto groups = model.params().groups();
  auto has = [&](const std::string& g) {
    return std::find(groups.begin(), groups.end(), g) != groups.end();
  };
  for (const char* g : {"extractor", "dist_enc", "dist_dec", "transform", "embed", "backbone",
                        "head"}) {
    if (!has(g)) missing.push_back(std::string("parameter group '") + g + "'");
  }
  if (data.size() == 0) missing.push_back("training dataset");
  if (data.qualities().empty()) missing.push_back("base codec qualities");
  if (!missing.empty()) {
    std::string msg = "training is missing components:";
    for (const auto& m : missing) msg += " " + m + ";";
    msg.pop_back();
    throw invalid_argument(msg);
  }
}

Trainer::Trainer(model::CdreModel& model, LossConfig config, const TrainingData& data)
    : model_(&model), config_(std::move(config)), data_(&data) {
  config_.validate();
  check_components(model, data);
  for (int q : config_.qualities) {
    if (std::find(data.qualities().begin(), data.qualities().end(), q) == data.qualities().end()) {
      throw invalid_argument("quality " + std::to_string(q) + " is not precompressed in the data");
    }
  }
  const bool fd = config_.regime == Regime::kFd;
  model.freeze_downstream(fd);
  auto& store = model.params();
  lr_.resize(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto g = nn::param_group(store.at(i).name);
    const bool downstream = g == "backbone" || g == "head";
    lr_[i] = downstream ? (fd ? 0.0 : config_.backbone_lr) : config_.lr;
  }
}

LossBreakdown Trainer::step() {
  Rng rng(mix_seed(config_.seed, static_cast<std::uint64_t>(step_)));
  const auto& all_q = data_->qualities();
  const int scales = model_->encoder().conditioned_scales();
  nn::Context ctx(model_->params(), true);
  LossBreakdown report;
  ag::Var total;
  const double inv_b = 1.0 / config_.batch_size;
  for (int b = 0; b < config_.batch_size; ++b) {
    const auto idx = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(data_->size())));
    const int q = config_.qualities[rng.uniform_int(static_cast<int>(config_.qualities.size()))];
    const auto qi = static_cast<std::size_t>(std::find(all_q.begin(), all_q.end(), q) - all_q.begin());
    const auto& pair = data_->pair(idx, qi);
    const auto fwd = model_->forward_pair(ctx, pair);
    const auto task = tasks::task_loss(fwd.logits, data_->sample(idx).label);
    ag::Var loss = task;
    if (config_.cosine_term && config_.lambda > 0.0) {
      loss = ag::add(loss, ag::scale(distortion_regularizer(fwd.f_original, fwd.f_compressed, scales),
                                     config_.lambda));
    }
    total = total.defined() ? ag::add(total, loss) : loss;

    const double lambda = config_.cosine_term ? config_.lambda : 0.0;
    const auto br = cdre_loss(task.item(), fwd.f_original, fwd.f_compressed, lambda);
    report.task += br.task * inv_b;
    report.total += br.total * inv_b;
    for (int i = 0; i < 3; ++i) report.distortion_reg[i] += br.distortion_reg[i] * inv_b;
  }
  ag::backward(ag::scale(total, inv_b));
  adam_.step(model_->params(), ctx.gradients(), lr_);
  ++step_;
  return report;
}

std::vector<LossBreakdown> Trainer::run() {
  std::vector<LossBreakdown> out;
  while (step_ < config_.steps) out.push_back(step());
  return out;
}

double pretrain_backbone(model::CdreModel& model, const std::vector<tasks::SyntheticSample>& data,
                         const PretrainConfig& config) {
  if (data.empty()) throw invalid_argument("pretraining needs a dataset");
  if (config.steps < 0 || config.batch_size <= 0) {
    throw invalid_argument("invalid pretraining schedule");
  }
  auto& store = model.params();
  model.freeze_downstream(false);
  std::vector<double> lr(store.size(), 0.0);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto g = nn::param_group(store.at(i).name);
    if (g == "backbone" || g == "head") lr[i] = config.lr;
  }
  Adam adam;
  double last = 0.0;
  for (int s = 0; s < config.steps; ++s) {
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(s)));
    nn::Context ctx(store, true);
    ag::Var total;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& sample = data[rng.uniform_int(static_cast<int>(data.size()))];
      const auto out = model.forward_plain(ctx, ag::Var::constant(sample.image));
      const auto l = tasks::task_loss(out.logits, sample.label);
      total = total.defined() ? ag::add(total, l) : l;
    }
    total = ag::scale(total, 1.0 / config.batch_size);
    last = total.item();
    ag::backward(total);
    adam.step(store, ctx.gradients(), lr);
  }
  return last;
}

std::uint64_t groups_hash(const nn::ParamStore& store, std::span<const char* const> groups) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char* g : groups) h = mix_seed(h, store.group_hash(g));
  return h;
}

std::uint64_t downstream_hash(const model::CdreModel& model) {
  return groups_hash(model.params(), model::kDownstreamGroups);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints

json model_config_to_json(const model::ModelConfig& c) {
  return json{{"family", tasks::family_name(c.backbone.family)},
              {"stage_dims", c.backbone.stage_dims},
              {"latent_channels", c.latent_channels},
              {"embedding_depth", c.embedding_depth},
              {"multi_scale", c.multi_scale},
              {"modulation", c.modulation},
              {"seed", c.seed}};
}

model::ModelConfig model_config_from_json(const json& j) {
  try {
    model::ModelConfig c;
    c.backbone.family = tasks::parse_family(j.at("family").get<std::string>());
    c.backbone.stage_dims = j.at("stage_dims").get<std::array<int, 4>>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.embedding_depth = j.at("embedding_depth").get<int>();
    c.multi_scale = j.at("multi_scale").get<bool>();
    c.modulation = j.at("modulation").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw checkpoint_error(std::string("checkpoint model config: ") + e.what());
  }
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
  for (double d : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
  }
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw checkpoint_error(path_ + ": truncated checkpoint at byte " + std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t u(int width) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  void doubles(std::vector<double>& out) {
    for (double& d : out) {
      const std::uint64_t bits = u(8);
      std::memcpy(&d, &bits, 8);
    }
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

} // namespace

void save_checkpoint(const std::filesystem::path& path, const model::CdreModel& model,
                     const CheckpointMeta& meta, const AdamState* optimizer) {
  const auto& store = model.params();
  json params = json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    params.push_back({{"name", store.at(i).name}, {"shape", store.at(i).value.shape}});
  }
  json groups = json::object();
  for (const auto& g : store.groups()) groups[g] = store.count(g);
  json header{{"format", "cdre-checkpoint"},
              {"version", kCheckpointVersion},
              {"model", model_config_to_json(model.config())},
              {"config", meta.config},
              {"config_hash", meta.config_hash},
              {"step", meta.step},
              {"regime", meta.regime},
              {"backbone_hash_before", meta.backbone_hash_before},
              {"groups", groups},
              {"params", params},
              {"optimizer", optimizer ? json{{"t", optimizer->t}} : json(nullptr)}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  write_u32(os, kCheckpointVersion);
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < store.size(); ++i) write_doubles(os, store.at(i).value.data);
  if (optimizer) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      const bool present = i < optimizer->m.size() && !optimizer->m[i].empty();
      os.put(present ? 1 : 0);
      if (present) {
        write_doubles(os, optimizer->m[i]);
        write_doubles(os, optimizer->v[i]);
      }
    }
  }
  if (!os) throw data_error("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw checkpoint_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  Reader r(ss.str(), path.string());
  if (std::memcmp(r.take(4), kCheckpointMagic, 4) != 0) {
    throw checkpoint_error(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.u(4);
  if (version != kCheckpointVersion) {
    throw checkpoint_error(path.string() + ": unsupported checkpoint version " +
                           std::to_string(version));
  }
  const auto len = r.u(8);
  json header;
  try {
    header = json::parse(std::string(r.take(len), len));
  } catch (const json::exception& e) {
    throw checkpoint_error(path.string() + ": corrupt header: " + e.what());
  }

  LoadedCheckpoint out;
  out.model = std::make_unique<model::CdreModel>(model_config_from_json(header.at("model")));
  auto& store = out.model->params();
  const auto& params = header.at("params");
  if (params.size() != store.size()) {
    throw checkpoint_error(path.string() + ": checkpoint has " + std::to_string(params.size()) +
                           " parameters, model expects " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto name = params[i].at("name").get<std::string>();
    const auto shape = params[i].at("shape").get<Shape>();
    auto& p = store.at(i);
    if (name != p.name || shape != p.value.shape) {
      throw checkpoint_error(path.string() + ": parameter " + name + " " + shape_str(shape) +
                             " does not match model parameter " + p.name + " " +
                             shape_str(p.value.shape));
    }
    r.doubles(p.value.data);
  }
  out.meta.config = header.value("config", json(nullptr));
  out.meta.config_hash = header.value("config_hash", "");
  out.meta.step = header.value("step", 0);
  out.meta.regime = header.value("regime", "fd");
  out.meta.backbone_hash_before = header.value("backbone_hash_before", "");
  if (header.contains("optimizer") && !header["optimizer"].is_null()) {
    out.has_optimizer = true;
    out.optimizer.t = header["optimizer"].at("t").get<std::int64_t>();
    out.optimizer.m.resize(store.size());
    out.optimizer.v.resize(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (r.u(1) == 0) continue;
      const auto n = store.at(i).value.data.size();
      out.optimizer.m[i].resize(n);
      out.optimizer.v[i].resize(n);
      r.doubles(out.optimizer.m[i]);
      r.doubles(out.optimizer.v[i]);
    }
  }
  if (!r.at_end()) throw checkpoint_error(path.string() + ": trailing bytes after checkpoint");
  return out;
}

} // namespace cdre::training
