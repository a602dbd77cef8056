#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cdre/backbones.hpp"
#include "cdre/config.hpp"
#include "cdre/model.hpp"
#include "cdre/training.hpp"

namespace cdre::experiment {

struct Splits {
  std::vector<tasks::SyntheticSample> train;
  std::vector<tasks::SyntheticSample> eval;
};

// Generated dataset on disk: PPM files plus manifest.json.
struct DatasetFiles {
  std::filesystem::path dir;
  std::filesystem::path manifest;
  std::vector<std::filesystem::path> images;
};

DatasetFiles write_dataset(const std::filesystem::path& dir, std::uint64_t seed, int n);
std::vector<tasks::SyntheticSample> read_dataset(const std::filesystem::path& dir);

// Renders a split, or reads it from cache_dir when a matching copy exists
// there (written on first use). Empty cache_dir disables caching.
std::vector<tasks::SyntheticSample> load_split(std::uint64_t seed, int n,
                                               const std::filesystem::path& cache_dir);

// Cache directory from CDRE_DATA_DIR, empty if unset.
std::filesystem::path data_cache_dir();

Splits make_splits(const config::RunConfig& c);

using Progress = std::function<void(const std::string&)>;

struct TrainedRun {
  std::unique_ptr<model::CdreModel> model;
  training::CheckpointMeta meta;
  training::AdamState optimizer;
  std::vector<training::LossBreakdown> losses;
};

// Copies parameter values of the named groups between models with the same
// parameter layout for those groups.
void copy_groups(const model::CdreModel& from, model::CdreModel& to,
                 std::span<const char* const> groups);

// Builds the model, pretrains backbone + head (or copies them from
// `pretrained`), then runs CDRE training per the config.
TrainedRun train_run(const config::RunConfig& c, const training::TrainingData& data,
                     const model::CdreModel* pretrained = nullptr,
                     const Progress& progress = nullptr);

// Continues a loaded checkpoint up to the configured step count.
TrainedRun resume_run(const config::RunConfig& c, const training::TrainingData& data,
                      training::LoadedCheckpoint loaded, const Progress& progress = nullptr);

} // namespace cdre::experiment
