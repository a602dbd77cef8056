#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdre/model.hpp"
#include "cdre/training.hpp"

namespace cdre::config {

// Experiment configuration. Every field has a default; serialized as JSON
// with one object per section.
struct RunConfig {
  std::uint64_t seed = 0;  // root of every random stream

  struct Dataset {
    int train_size = 2000;
    int eval_size = 400;
    bool operator==(const Dataset&) const = default;
  } dataset;

  struct Codec {
    std::vector<int> train_qualities{10, 30, 50, 70};
    bool operator==(const Codec&) const = default;
  } codec;

  struct Backbone {
    std::string family = "cnn";
    int pretrain_steps = 3000;
    double pretrain_lr = 1e-3;
    int pretrain_batch_size = 8;
    bool operator==(const Backbone&) const = default;
  } backbone;

  struct Cdre {
    int channels = 6;
    int depth = 4;
    bool multi_scale = true;
    bool modulation = true;
    bool cosine_term = true;
    bool operator==(const Cdre&) const = default;
  } cdre;

  struct Training {
    std::string regime = "fd";
    double lambda = 0.1;
    int steps = 2000;
    double lr = 1e-3;
    double backbone_lr = 1e-4;
    int batch_size = 8;
    bool operator==(const Training&) const = default;
  } training;

  struct Eval {
    std::vector<int> qualities{10, 30, 50, 70};
    bool include_side_channel = true;
    bool operator==(const Eval&) const = default;
  } eval;

  bool operator==(const RunConfig&) const = default;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Missing fields take defaults; unknown keys and wrong types are rejected.
RunConfig from_json(const nlohmann::json& j);
RunConfig parse(const std::string& text);
std::string serialize(const RunConfig& c);
RunConfig load(const std::filesystem::path& path);

std::uint64_t config_hash(const RunConfig& c);
std::string config_hash_hex(const RunConfig& c);

// Dotted paths of fields whose values differ ("cdre.channels", ...).
std::vector<std::string> diff_fields(const RunConfig& a, const RunConfig& b);

// Derived streams; all from the root seed.
enum class Stream : std::uint64_t {
  kModelInit = 1,
  kTrainSplit = 2,
  kEvalSplit = 3,
  kPretrain = 4,
  kTraining = 5,
};
std::uint64_t stream_seed(const RunConfig& c, Stream s);

model::ModelConfig model_config(const RunConfig& c);
training::LossConfig loss_config(const RunConfig& c);
training::PretrainConfig pretrain_config(const RunConfig& c);

} // namespace cdre::config
