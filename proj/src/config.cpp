#include "cdre/config.hpp"

#include <fstream>
#include <sstream>

#include "cdre/base_codec.hpp"
#include "cdre/embedding.hpp"
#include "cdre/error.hpp"
#include "cdre/random.hpp"

namespace cdre::config {

using nlohmann::json;

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integral fields must stay integral.
    return !(a.is_number_integer() && !b.is_number_integer());
  }
  return a.type() == b.type();
}

// Overlays `in` onto `base`, rejecting keys that are not already present.
void overlay(json& base, const json& in, const std::string& path) {
  if (!in.is_object()) throw invalid_argument("config: " + (path.empty() ? "root" : path) +
                                              " must be an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw invalid_argument("config: unknown key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      if (!same_kind(slot, it.value())) {
        throw invalid_argument("config: key '" + key + "' has the wrong type");
      }
      if (slot.is_array()) {
        for (const auto& e : it.value()) {
          if (!e.is_number_integer()) {
            throw invalid_argument("config: key '" + key + "' must list integers");
          }
        }
      }
      slot = it.value();
    }
  }
}

void collect_diffs(const json& a, const json& b, const std::string& path,
                   std::vector<std::string>& out) {
  for (auto it = a.begin(); it != a.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    const json& other = b.at(it.key());
    if (it.value().is_object()) {
      collect_diffs(it.value(), other, key, out);
    } else if (it.value() != other) {
      out.push_back(key);
    }
  }
}

} // namespace

void RunConfig::validate() const {
  if (dataset.train_size <= 0 || dataset.eval_size <= 0) {
    throw invalid_argument("config: dataset sizes must be positive");
  }
  if (codec.train_qualities.empty()) throw invalid_argument("config: codec.train_qualities is empty");
  for (int q : codec.train_qualities) (void)cdre::codec::CodecQuality(q);
  tasks::parse_family(backbone.family);
  if (backbone.pretrain_steps < 0 || backbone.pretrain_batch_size <= 0 ||
      !(backbone.pretrain_lr > 0.0)) {
    throw invalid_argument("config: invalid backbone pretraining schedule");
  }
  if (cdre.channels < 1) throw invalid_argument("config: cdre.channels must be >= 1");
  embedding::validate_depth(cdre.depth);
  loss_config(*this).validate();
  if (eval.qualities.empty()) throw invalid_argument("config: eval.qualities is empty");
  for (int q : eval.qualities) (void)cdre::codec::CodecQuality(q);
}

json to_json(const RunConfig& c) {
  return json{
      {"seed", c.seed},
      {"dataset", {{"train_size", c.dataset.train_size}, {"eval_size", c.dataset.eval_size}}},
      {"codec", {{"train_qualities", c.codec.train_qualities}}},
      {"backbone",
       {{"family", c.backbone.family},
        {"pretrain_steps", c.backbone.pretrain_steps},
        {"pretrain_lr", c.backbone.pretrain_lr},
        {"pretrain_batch_size", c.backbone.pretrain_batch_size}}},
      {"cdre",
       {{"channels", c.cdre.channels},
        {"depth", c.cdre.depth},
        {"multi_scale", c.cdre.multi_scale},
        {"modulation", c.cdre.modulation},
        {"cosine_term", c.cdre.cosine_term}}},
      {"training",
       {{"regime", c.training.regime},
        {"lambda", c.training.lambda},
        {"steps", c.training.steps},
        {"lr", c.training.lr},
        {"backbone_lr", c.training.backbone_lr},
        {"batch_size", c.training.batch_size}}},
      {"eval",
       {{"qualities", c.eval.qualities}, {"include_side_channel", c.eval.include_side_channel}}},
  };
}

RunConfig from_json(const json& in) {
  json j = to_json(RunConfig{});
  overlay(j, in, "");
  RunConfig c;
  c.seed = j["seed"].get<std::uint64_t>();
  c.dataset.train_size = j["dataset"]["train_size"].get<int>();
  c.dataset.eval_size = j["dataset"]["eval_size"].get<int>();
  c.codec.train_qualities = j["codec"]["train_qualities"].get<std::vector<int>>();
  const auto& b = j["backbone"];
  c.backbone.family = b["family"].get<std::string>();
  c.backbone.pretrain_steps = b["pretrain_steps"].get<int>();
  c.backbone.pretrain_lr = b["pretrain_lr"].get<double>();
  c.backbone.pretrain_batch_size = b["pretrain_batch_size"].get<int>();
  const auto& d = j["cdre"];
  c.cdre.channels = d["channels"].get<int>();
  c.cdre.depth = d["depth"].get<int>();
  c.cdre.multi_scale = d["multi_scale"].get<bool>();
  c.cdre.modulation = d["modulation"].get<bool>();
  c.cdre.cosine_term = d["cosine_term"].get<bool>();
  const auto& t = j["training"];
  c.training.regime = t["regime"].get<std::string>();
  c.training.lambda = t["lambda"].get<double>();
  c.training.steps = t["steps"].get<int>();
  c.training.lr = t["lr"].get<double>();
  c.training.backbone_lr = t["backbone_lr"].get<double>();
  c.training.batch_size = t["batch_size"].get<int>();
  c.eval.qualities = j["eval"]["qualities"].get<std::vector<int>>();
  c.eval.include_side_channel = j["eval"]["include_side_channel"].get<bool>();
  c.validate();
  return c;
}

RunConfig parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw invalid_argument(std::string("config: ") + e.what());
  }
  return from_json(j);
}

std::string serialize(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

RunConfig load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw invalid_argument("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::uint64_t config_hash(const RunConfig& c) { return hash_string(to_json(c).dump()); }

std::string config_hash_hex(const RunConfig& c) { return training::hex64(config_hash(c)); }

std::vector<std::string> diff_fields(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  collect_diffs(to_json(a), to_json(b), "", out);
  return out;
}

std::uint64_t stream_seed(const RunConfig& c, Stream s) {
  return mix_seed(c.seed, static_cast<std::uint64_t>(s));
}

model::ModelConfig model_config(const RunConfig& c) {
  model::ModelConfig m;
  m.backbone = tasks::BackboneSpec::for_family(tasks::parse_family(c.backbone.family));
  m.latent_channels = c.cdre.channels;
  m.embedding_depth = c.cdre.depth;
  m.multi_scale = c.cdre.multi_scale;
  m.modulation = c.cdre.modulation;
  m.seed = stream_seed(c, Stream::kModelInit);
  return m;
}

training::LossConfig loss_config(const RunConfig& c) {
  training::LossConfig l;
  l.lambda = c.training.lambda;
  l.regime = training::parse_regime(c.training.regime);
  l.steps = c.training.steps;
  l.lr = c.training.lr;
  l.backbone_lr = c.training.backbone_lr;
  l.seed = stream_seed(c, Stream::kTraining);
  l.batch_size = c.training.batch_size;
  l.qualities = c.codec.train_qualities;
  l.cosine_term = c.cdre.cosine_term;
  return l;
}

training::PretrainConfig pretrain_config(const RunConfig& c) {
  training::PretrainConfig p;
  p.steps = c.backbone.pretrain_steps;
  p.lr = c.backbone.pretrain_lr;
  p.batch_size = c.backbone.pretrain_batch_size;
  p.seed = stream_seed(c, Stream::kPretrain);
  return p;
}

} // namespace cdre::config
