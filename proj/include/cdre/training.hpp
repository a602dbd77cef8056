#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdre/backbones.hpp"
#include "cdre/base_codec.hpp"
#include "cdre/model.hpp"

namespace cdre::training {

enum class Regime { kFd, kJoint };

std::string regime_name(Regime r);
Regime parse_regime(const std::string& name);

struct LossConfig {
  double lambda = 0.1;
  Regime regime = Regime::kFd;
  int steps = 2000;
  double lr = 1e-3;           // CDRE modules
  double backbone_lr = 1e-4;  // backbone and head, joint regime only
  std::uint64_t seed = 0;
  int batch_size = 8;
  std::vector<int> qualities{10, 30, 50, 70};
  bool cosine_term = true;  // false drops the regularizer (ablation)

  void validate() const;
};

struct LossBreakdown {
  double total = 0.0;
  double task = 0.0;
  std::array<double, 3> distortion_reg{};  // 1 + cosine per scale, in [0, 2]
};

// total = task + lambda * sum_i (1 + cosine(F_o_i, F_c_i)).
LossBreakdown cdre_loss(double task, const sensitive::FeaturePyramid& f_original,
                        const sensitive::FeaturePyramid& f_compressed, double lambda);

// Differentiable regularizer over the first `scales` levels.
ag::Var distortion_regularizer(const sensitive::FeaturePyramid& f_original,
                               const sensitive::FeaturePyramid& f_compressed, int scales);

// Samples with every configured quality precompressed.
class TrainingData {
 public:
  TrainingData() = default;
  TrainingData(std::vector<tasks::SyntheticSample> samples, std::vector<int> qualities);

  std::size_t size() const { return samples_.size(); }
  const std::vector<int>& qualities() const { return qualities_; }
  const tasks::SyntheticSample& sample(std::size_t i) const { return samples_.at(i); }
  const codec::ImagePair& pair(std::size_t i, std::size_t quality_index) const;
  const std::vector<tasks::SyntheticSample>& samples() const { return samples_; }

 private:
  std::vector<tasks::SyntheticSample> samples_;
  std::vector<int> qualities_;
  std::vector<std::vector<codec::ImagePair>> pairs_;
};

struct AdamState {
  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v;
};

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  // lr_by_param[i] <= 0 skips the parameter.
  void step(nn::ParamStore& store, const std::vector<std::vector<double>>& grads,
            const std::vector<double>& lr_by_param);

  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  AdamState state_;
};

// Throws listing every missing piece (parameter groups, data, qualities).
void check_components(const model::CdreModel& model, const TrainingData& data);

class Trainer {
 public:
  Trainer(model::CdreModel& model, LossConfig config, const TrainingData& data);

  LossBreakdown step();
  // Runs until step_index() == config.steps; returns per-step losses.
  std::vector<LossBreakdown> run();

  int step_index() const { return step_; }
  void set_step_index(int step) { step_ = step; }
  Adam& optimizer() { return adam_; }
  const LossConfig& config() const { return config_; }

 private:
  model::CdreModel* model_;
  LossConfig config_;
  const TrainingData* data_;
  Adam adam_;
  std::vector<double> lr_;
  int step_ = 0;
};

struct PretrainConfig {
  int steps = 600;
  double lr = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

// Trains backbone and head alone on original images; returns final loss.
double pretrain_backbone(model::CdreModel& model, const std::vector<tasks::SyntheticSample>& data,
                         const PretrainConfig& config);

std::uint64_t groups_hash(const nn::ParamStore& store, std::span<const char* const> groups);
std::uint64_t downstream_hash(const model::CdreModel& model);
std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'R', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

struct CheckpointMeta {
  nlohmann::json config;  // echo of the producing run config (may be null)
  std::string config_hash;
  int step = 0;
  std::string regime = "fd";
  std::string backbone_hash_before;  // downstream hash when CDRE training began
};

struct LoadedCheckpoint {
  std::unique_ptr<model::CdreModel> model;
  CheckpointMeta meta;
  bool has_optimizer = false;
  AdamState optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const model::CdreModel& model,
                     const CheckpointMeta& meta, const AdamState* optimizer);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace cdre::training
