#include "cdre/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cdre/error.hpp"
#include "cdre/image_io.hpp"

namespace cdre::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string dataset_hash(std::uint64_t seed, int n) {
  return training::hex64(mix_seed(hash_string("synthetic-v1"), mix_seed(seed, n)));
}

} // namespace

DatasetFiles write_dataset(const fs::path& dir, std::uint64_t seed, int n) {
  if (n <= 0) throw invalid_argument("dataset size must be positive");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw data_error("cannot create " + dir.string() + ": " + ec.message());
  DatasetFiles out;
  out.dir = dir;
  json entries = json::array();
  for (int i = 0; i < n; ++i) {
    const auto s = tasks::render_sample(seed, i);
    char name[32];
    std::snprintf(name, sizeof name, "%06d.ppm", i);
    write_ppm(dir / name, s.image);
    out.images.push_back(dir / name);
    entries.push_back({{"file", name}, {"label", s.label}, {"index", i}});
  }
  json manifest{{"format", "cdre-synthetic"},
                {"seed", seed},
                {"n", n},
                {"config_hash", dataset_hash(seed, n)},
                {"entries", entries}};
  out.manifest = dir / "manifest.json";
  std::ofstream os(out.manifest);
  os << manifest.dump(2) << "\n";
  if (!os) throw data_error("cannot write " + out.manifest.string());
  return out;
}

std::vector<tasks::SyntheticSample> read_dataset(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw data_error("cannot read " + path.string());
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw data_error(path.string() + ": " + e.what());
  }
  std::vector<tasks::SyntheticSample> out;
  const std::uint64_t seed = m.value("seed", std::uint64_t{0});
  for (const auto& e : m.at("entries")) {
    tasks::SyntheticSample s;
    s.image = read_ppm(dir / e.at("file").get<std::string>());
    s.label = e.at("label").get<int>();
    if (s.label < 0 || s.label >= tasks::kNumClasses) {
      throw data_error(path.string() + ": label out of range");
    }
    s.seed = mix_seed(seed, e.value("index", 0));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<tasks::SyntheticSample> load_split(std::uint64_t seed, int n,
                                               const fs::path& cache_dir) {
  if (cache_dir.empty()) return tasks::gen_dataset(seed, n);
  const auto dir = cache_dir / ("synthetic-" + dataset_hash(seed, n));
  if (fs::exists(dir / "manifest.json")) {
    auto cached = read_dataset(dir);
    if (static_cast<int>(cached.size()) == n) return cached;
  }
  write_dataset(dir, seed, n);
  return read_dataset(dir);
}

fs::path data_cache_dir() {
  const char* env = std::getenv("CDRE_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path();
}

Splits make_splits(const config::RunConfig& c) {
  const auto cache = data_cache_dir();
  Splits s;
  s.train = load_split(config::stream_seed(c, config::Stream::kTrainSplit), c.dataset.train_size,
                       cache);
  s.eval = load_split(config::stream_seed(c, config::Stream::kEvalSplit), c.dataset.eval_size,
                      cache);
  return s;
}

void copy_groups(const model::CdreModel& from, model::CdreModel& to,
                 std::span<const char* const> groups) {
  const auto& src = from.params();
  auto& dst = to.params();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto& p = dst.at(i);
    const auto g = nn::param_group(p.name);
    bool wanted = false;
    for (const char* w : groups) wanted = wanted || g == w;
    if (!wanted) continue;
    const auto id = src.find(p.name);
    if (id == nn::kNoParam || src.at(id).value.shape != p.value.shape) {
      throw checkpoint_error("cannot copy parameter " + p.name + ": layouts differ");
    }
    p.value = src.at(id).value;
  }
}

namespace {

TrainedRun finish(const config::RunConfig& c, const training::TrainingData& data,
                  std::unique_ptr<model::CdreModel> model, training::CheckpointMeta meta,
                  const training::AdamState* optimizer, int start_step, const Progress& progress) {
  training::Trainer trainer(*model, config::loss_config(c), data);
  if (optimizer) trainer.optimizer().state() = *optimizer;
  trainer.set_step_index(start_step);
  TrainedRun run;
  const int total = trainer.config().steps;
  const int report_every = std::max(1, total / 10);
  while (trainer.step_index() < total) {
    run.losses.push_back(trainer.step());
    if (progress && (trainer.step_index() % report_every == 0 || trainer.step_index() == total)) {
      const auto& l = run.losses.back();
      char buf[160];
      std::snprintf(buf, sizeof buf, "step=%d total=%.5f task=%.5f reg=%.4f,%.4f,%.4f",
                    trainer.step_index(), l.total, l.task, l.distortion_reg[0],
                    l.distortion_reg[1], l.distortion_reg[2]);
      progress(buf);
    }
  }
  meta.step = trainer.step_index();
  meta.regime = c.training.regime;
  meta.config = config::to_json(c);
  meta.config_hash = config::config_hash_hex(c);
  run.meta = std::move(meta);
  run.optimizer = trainer.optimizer().state();
  run.model = std::move(model);
  return run;
}

} // namespace

TrainedRun train_run(const config::RunConfig& c, const training::TrainingData& data,
                     const model::CdreModel* pretrained, const Progress& progress) {
  c.validate();
  auto model = std::make_unique<model::CdreModel>(config::model_config(c));
  if (pretrained) {
    copy_groups(*pretrained, *model, model::kDownstreamGroups);
  } else {
    const double loss = training::pretrain_backbone(*model, data.samples(), config::pretrain_config(c));
    if (progress) progress("pretrain_loss=" + std::to_string(loss));
  }
  training::CheckpointMeta meta;
  meta.backbone_hash_before = training::hex64(training::downstream_hash(*model));
  return finish(c, data, std::move(model), std::move(meta), nullptr, 0, progress);
}

TrainedRun resume_run(const config::RunConfig& c, const training::TrainingData& data,
                      training::LoadedCheckpoint loaded, const Progress& progress) {
  c.validate();
  if (!(loaded.model->config() == config::model_config(c))) {
    throw checkpoint_error("checkpoint model does not match the configured model");
  }
  if (loaded.meta.regime != c.training.regime) {
    throw checkpoint_error("checkpoint regime " + loaded.meta.regime + " differs from configured " +
                           c.training.regime);
  }
  if (loaded.meta.step > c.training.steps) {
    throw checkpoint_error("checkpoint is at step " + std::to_string(loaded.meta.step) +
                           ", beyond the configured " + std::to_string(c.training.steps));
  }
  const training::AdamState* opt = loaded.has_optimizer ? &loaded.optimizer : nullptr;
  const int start = loaded.meta.step;
  return finish(c, data, std::move(loaded.model), loaded.meta, opt, start, progress);
}

} // namespace cdre::experiment
