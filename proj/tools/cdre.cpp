// cdre: command-line driver for the distortion side-channel pipeline.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 checkpoint mismatch.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cdre/base_codec.hpp"
#include "cdre/config.hpp"
#include "cdre/distortion_codec.hpp"
#include "cdre/error.hpp"
#include "cdre/evaluation.hpp"
#include "cdre/experiment.hpp"
#include "cdre/image_io.hpp"
#include "cdre/training.hpp"

namespace fs = std::filesystem;
using namespace cdre;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitCheckpoint = 4;

void kv(const std::string& key, const std::string& value) {
  std::cout << key << "=" << value << "\n";
}

void kv(const std::string& key, double value, const char* fmt = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, value);
  kv(key, std::string(buf));
}

void kv(const std::string& key, long long value) { kv(key, std::to_string(value)); }

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot read " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw data_error("failed writing " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw data_error("cannot write " + path.string());
  os << text;
  if (!os) throw data_error("failed writing " + path.string());
}

std::vector<int> parse_qualities(const std::string& list) {
  std::vector<int> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int q = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      (void)codec::CodecQuality(q);
      out.push_back(q);
    } catch (const std::logic_error&) {
      throw invalid_argument("bad quality '" + item + "' in --qualities");
    }
  }
  if (out.empty()) throw invalid_argument("--qualities is empty");
  return out;
}

bool parse_on_off(const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw invalid_argument("--include-side-channel expects on|off, got '" + v + "'");
}

// Flags shared by several commands; each overrides the config when given.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::string regime;
  std::string qualities;
  std::optional<int> channels;
  std::optional<int> depth;
  std::string side;
  std::optional<int> steps;

  void add_to(CLI::App* cmd, bool training_flags) {
    cmd->add_option("--seed", seed, "root seed");
    cmd->add_option("--qualities", qualities, "comma-separated base codec qualities");
    cmd->add_option("--include-side-channel", side, "count side-channel bits: on|off");
    if (training_flags) {
      cmd->add_option("--regime", regime, "fd|joint");
      cmd->add_option("--channels", channels, "latent channels C_y");
      cmd->add_option("--depth", depth, "embedding depth 1-4");
      cmd->add_option("--steps", steps, "training steps");
    }
  }

  void apply(config::RunConfig& c) const {
    if (seed) c.seed = *seed;
    if (!regime.empty()) {
      training::parse_regime(regime);
      c.training.regime = regime;
    }
    if (!qualities.empty()) c.eval.qualities = parse_qualities(qualities);
    if (channels) c.cdre.channels = *channels;
    if (depth) c.cdre.depth = *depth;
    if (!side.empty()) c.eval.include_side_channel = parse_on_off(side);
    if (steps) c.training.steps = *steps;
    c.validate();
  }
};

config::RunConfig config_from_checkpoint(const training::LoadedCheckpoint& ck) {
  if (ck.meta.config.is_null()) return config::RunConfig{};
  return config::from_json(ck.meta.config);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(std::uint64_t seed, int n, std::string out_dir) {
  if (n <= 0) throw invalid_argument("--n must be positive");
  if (out_dir.empty()) out_dir = experiment::data_cache_dir().string();
  if (out_dir.empty()) throw invalid_argument("--out not given and CDRE_DATA_DIR is unset");
  const auto files = experiment::write_dataset(out_dir, seed, n);
  kv("images", static_cast<long long>(files.images.size()));
  kv("manifest", files.manifest.string());
  return 0;
}

int cmd_compress(const std::string& input, int quality, const std::string& out) {
  const auto image = read_ppm(input);
  const auto bytes = codec::dct_encode(image, codec::CodecQuality(quality));
  write_bytes(out, bytes);
  kv("bytes", static_cast<long long>(bytes.size()));
  kv("bpp", codec::measure_bpp(bytes.size(), image.dim(1), image.dim(2)));
  return 0;
}

int cmd_decompress(const std::string& input, const std::string& out) {
  const auto bytes = read_bytes(input);
  const auto image = codec::dct_decode(bytes);
  write_ppm(out, image);
  kv("height", static_cast<long long>(image.dim(1)));
  kv("width", static_cast<long long>(image.dim(2)));
  return 0;
}

int cmd_train(const std::string& config_path, const Overrides& ov, const std::string& out,
              const std::string& resume) {
  auto cfg = config::load(config_path);
  ov.apply(cfg);
  const auto hash = config::config_hash_hex(cfg);
  kv("config_hash", hash);
  const auto splits = experiment::make_splits(cfg);
  const training::TrainingData data(splits.train, cfg.codec.train_qualities);
  auto progress = [](const std::string& s) { std::cerr << s << "\n"; };
  experiment::TrainedRun run;
  if (!resume.empty()) {
    auto loaded = training::load_checkpoint(resume);
    kv("resumed_from_step", static_cast<long long>(loaded.meta.step));
    run = experiment::resume_run(cfg, data, std::move(loaded), progress);
  } else {
    run = experiment::train_run(cfg, data, nullptr, progress);
  }
  training::save_checkpoint(out, *run.model, run.meta, &run.optimizer);
  kv("checkpoint", out);
  kv("regime", run.meta.regime);
  kv("step", static_cast<long long>(run.meta.step));
  kv("backbone_hash_before", run.meta.backbone_hash_before);
  kv("backbone_hash", training::hex64(training::downstream_hash(*run.model)));
  if (!run.losses.empty()) {
    const auto& l = run.losses.back();
    kv("final_total", l.total);
    kv("final_task", l.task);
    kv("final_reg", std::to_string(l.distortion_reg[0]) + "," + std::to_string(l.distortion_reg[1]) +
                        "," + std::to_string(l.distortion_reg[2]));
  }
  return 0;
}

int cmd_encode_dist(const std::string& original, const std::string& compressed,
                    const std::string& checkpoint, const std::string& out) {
  codec::ImagePair pair;
  pair.original = read_ppm(original);
  pair.compressed = read_ppm(compressed);
  if (pair.original.shape != pair.compressed.shape) {
    throw data_error("original " + shape_str(pair.original.shape) + " and compressed " +
                     shape_str(pair.compressed.shape) + " differ in size");
  }
  const auto ck = training::load_checkpoint(checkpoint);
  const auto bits = ck.model->encode_bits(pair);
  const auto bytes = distortion::serialize(bits);
  write_bytes(out, bytes);
  kv("config_hash", ck.meta.config_hash);
  kv("channels", static_cast<long long>(bits.channels));
  kv("latent_h", static_cast<long long>(bits.latent_h));
  kv("latent_w", static_cast<long long>(bits.latent_w));
  kv("bytes", static_cast<long long>(bytes.size()));
  kv("side_bpp", distortion::side_bpp(bits), "%.8f");
  return 0;
}

int cmd_decode_dist(const std::string& input, const std::string& checkpoint,
                    const std::string& out, const std::string& compressed) {
  const auto bits = distortion::deserialize(read_bytes(input));
  const auto ck = training::load_checkpoint(checkpoint);
  if (bits.channels != ck.model->config().latent_channels) {
    throw checkpoint_error("bitstream has " + std::to_string(bits.channels) +
                           " channels but the checkpoint expects " +
                           std::to_string(ck.model->config().latent_channels));
  }
  nn::Context ctx(ck.model->params(), false);
  const auto decoded = ck.model->decode_feature(ctx, ag::Var::constant(bits.to_tensor()),
                                                bits.source_h, bits.source_w);
  std::vector<int> flat(bits.bits.begin(), bits.bits.end());
  json doc{{"config_hash", ck.meta.config_hash},
           {"channels", bits.channels},
           {"latent_h", bits.latent_h},
           {"latent_w", bits.latent_w},
           {"source_h", bits.source_h},
           {"source_w", bits.source_w},
           {"bits", flat},
           {"decoded_shape", decoded.shape()},
           {"decoded_hash", training::hex64(hash_values(decoded.value().data, 0))}};
  if (!compressed.empty()) {
    const auto image = read_ppm(compressed);
    const auto logits = ck.model->logits_with_bits(image, bits);
    doc["prediction"] = tasks::argmax(logits.data);
    kv("prediction", static_cast<long long>(tasks::argmax(logits.data)));
  }
  if (!out.empty()) write_text(out, doc.dump(2) + "\n");
  kv("config_hash", ck.meta.config_hash);
  kv("channels", static_cast<long long>(bits.channels));
  kv("side_bpp", distortion::side_bpp(bits), "%.8f");
  kv("decoded_shape", shape_str(decoded.shape()));
  return 0;
}

int cmd_eval(const std::string& checkpoint, const Overrides& ov, const std::string& out,
             const std::string& baseline_out, const std::string& plot_out) {
  const auto ck = training::load_checkpoint(checkpoint);
  auto cfg = config_from_checkpoint(ck);
  ov.apply(cfg);
  const auto splits = experiment::make_splits(cfg);
  auto curve = eval::rate_task_curve(*ck.model, cfg.eval.qualities, splits.eval,
                                     cfg.eval.include_side_channel, true, "cdre");
  auto base = eval::rate_task_curve(*ck.model, cfg.eval.qualities, splits.eval, false, false,
                                    "baseline");
  curve.config_hash = base.config_hash = config::config_hash_hex(cfg);
  kv("config_hash", curve.config_hash);
  kv("backbone_hash", training::hex64(training::downstream_hash(*ck.model)));
  kv("backbone_hash_before", ck.meta.backbone_hash_before);
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "quality=%d bpp=%.6f metric=%.4f baseline_bpp=%.6f baseline_metric=%.4f",
                  curve.points[i].quality, curve.points[i].bpp, curve.points[i].metric,
                  base.points[i].bpp, base.points[i].metric);
    std::cout << buf << "\n";
  }
  if (!out.empty()) eval::write_curve(out, curve);
  if (!baseline_out.empty()) eval::write_curve(baseline_out, base);
  if (!plot_out.empty()) {
    const std::vector<eval::RateTaskCurve> curves{base, curve};
    write_text(plot_out, "# config_hash=" + curve.config_hash + "\n" + eval::plot_data(curves));
  }
  try {
    kv("bd_rate_vs_baseline", eval::bd_rate(base, curve), "%.2f");
  } catch (const Error& e) {
    kv("bd_rate_vs_baseline", std::string("n/a (") + e.what() + ")");
  }
  return 0;
}

int cmd_bdrate(const std::string& anchor, const std::string& test) {
  const double v = eval::bd_rate(eval::read_curve(anchor), eval::read_curve(test));
  kv("bd_rate", std::fabs(v) < 0.005 ? 0.0 : v, "%.2f");
  return 0;
}

int cmd_overhead(const std::string& checkpoint, const std::string& config_path, const Overrides& ov,
                 int height, int width) {
  std::unique_ptr<model::CdreModel> owned;
  std::string hash;
  if (!checkpoint.empty()) {
    auto ck = training::load_checkpoint(checkpoint);
    owned = std::move(ck.model);
    hash = ck.meta.config_hash;
  } else {
    auto cfg = config_path.empty() ? config::RunConfig{} : config::load(config_path);
    ov.apply(cfg);
    owned = std::make_unique<model::CdreModel>(config::model_config(cfg));
    hash = config::config_hash_hex(cfg);
  }
  const auto r = eval::overhead(*owned, height, width);
  kv("config_hash", hash);
  kv("height", static_cast<long long>(height));
  kv("width", static_cast<long long>(width));
  for (const auto& [g, n] : r.params_by_group) kv("params_" + g, static_cast<long long>(n));
  for (const auto& [g, m] : r.macs_per_pixel_by_group) kv("macs_per_pixel_" + g, m, "%.2f");
  kv("encoder_side_params", static_cast<long long>(r.encoder_side_params()));
  kv("encoder_side_macs_per_pixel", r.encoder_side_macs_per_pixel(), "%.2f");
  kv("decoder_side_params", static_cast<long long>(r.decoder_side_params()));
  kv("decoder_side_macs_per_pixel", r.decoder_side_macs_per_pixel(), "%.2f");
  kv("side_bpp", r.side_bpp, "%.8f");
  kv("side_kbytes_per_s_30fps", r.side_bpp * height * width * 30.0 / 8.0 / 1000.0, "%.3f");
  return 0;
}

int cmd_ablate(const std::string& kind, const std::string& config_path, const Overrides& ov,
               const std::string& out, const std::string& plot_out) {
  auto cfg = config_path.empty() ? config::RunConfig{} : config::load(config_path);
  ov.apply(cfg);
  const auto k = eval::parse_ablation_kind(kind);
  const auto table = eval::run_ablation(k, cfg, [](const std::string& s) { std::cerr << s << "\n"; });
  kv("kind", eval::ablation_kind_name(k));
  kv("anchor", table.anchor_label);
  kv("config_hash", table.base_config_hash);
  for (const auto& r : table.rows) {
    std::ostringstream line;
    line << "row=" << r.name << " config_hash=" << r.config_hash << " bd_rate=";
    if (r.bd_rate) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", *r.bd_rate);
      line << buf;
    } else {
      line << "n/a";
    }
    std::cout << line.str() << "\n";
  }
  if (!out.empty()) write_text(out, table.to_csv());
  if (!plot_out.empty()) {
    std::vector<eval::RateTaskCurve> curves{table.anchor};
    for (const auto& r : table.rows) curves.push_back(r.curve);
    write_text(plot_out, "# config_hash=" + table.base_config_hash + "\n" + eval::plot_data(curves));
  }
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"cdre: compression distortion side channel for machine vision"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset to PPM files");
  std::uint64_t gen_seed = 0;
  int gen_n = 0;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--n", gen_n, "number of images")->required();
  gen->add_option("--out", gen_out, "output directory (default: $CDRE_DATA_DIR)");

  auto* comp = app.add_subcommand("compress", "encode a PPM with the base codec");
  std::string comp_in, comp_out;
  int comp_q = 50;
  comp->add_option("--input", comp_in)->required();
  comp->add_option("--quality", comp_q, "1-99");
  comp->add_option("--out", comp_out)->required();

  auto* decomp = app.add_subcommand("decompress", "decode a base codec bitstream to PPM");
  std::string decomp_in, decomp_out;
  decomp->add_option("--input", decomp_in)->required();
  decomp->add_option("--out", decomp_out)->required();

  auto* train = app.add_subcommand("train", "pretrain the backbone and train CDRE modules");
  std::string train_config, train_out = "cdre.ckpt", train_resume;
  Overrides train_ov;
  train->add_option("--config", train_config, "run config (JSON)")->required();
  train->add_option("--out", train_out, "checkpoint path");
  train->add_option("--resume", train_resume, "continue from this checkpoint");
  train_ov.add_to(train, true);

  auto* enc = app.add_subcommand("encode-dist", "produce the distortion side-channel bitstream");
  std::string enc_orig, enc_comp, enc_ck, enc_out;
  enc->add_option("--original", enc_orig)->required();
  enc->add_option("--compressed", enc_comp)->required();
  enc->add_option("--checkpoint", enc_ck)->required();
  enc->add_option("--out", enc_out)->required();

  auto* dec = app.add_subcommand("decode-dist", "decode a side-channel bitstream");
  std::string dec_in, dec_ck, dec_out, dec_comp;
  dec->add_option("--input", dec_in)->required();
  dec->add_option("--checkpoint", dec_ck)->required();
  dec->add_option("--out", dec_out, "JSON dump of the binary representation");
  dec->add_option("--compressed", dec_comp, "classify this decoded frame with the side channel");

  auto* ev = app.add_subcommand("eval", "rate-task curves for a checkpoint");
  std::string ev_ck, ev_out, ev_base_out, ev_plot;
  Overrides ev_ov;
  ev->add_option("--checkpoint", ev_ck)->required();
  ev->add_option("--out", ev_out, "CDRE curve file (.json or .csv)");
  ev->add_option("--baseline-out", ev_base_out, "baseline curve file");
  ev->add_option("--plot", ev_plot, "plot-data file");
  ev_ov.add_to(ev, false);

  auto* bd = app.add_subcommand("bdrate", "BD-rate of a test curve against an anchor");
  std::string bd_anchor, bd_test;
  bd->add_option("anchor", bd_anchor)->required();
  bd->add_option("test", bd_test)->required();

  auto* oh = app.add_subcommand("overhead", "parameter and MAC accounting");
  std::string oh_ck, oh_config;
  int oh_h = 720, oh_w = 1280;
  Overrides oh_ov;
  oh->add_option("--checkpoint", oh_ck);
  oh->add_option("--config", oh_config);
  oh->add_option("--height", oh_h);
  oh->add_option("--width", oh_w);
  oh_ov.add_to(oh, true);

  auto* ab = app.add_subcommand("ablate", "train and evaluate an ablation sweep");
  std::string ab_kind, ab_config, ab_out, ab_plot;
  Overrides ab_ov;
  ab->add_option("--kind", ab_kind, "extractor_parts|embedding_depth|channels")->required();
  ab->add_option("--config", ab_config);
  ab->add_option("--out", ab_out, "CSV table");
  ab->add_option("--plot", ab_plot, "plot-data file");
  ab_ov.add_to(ab, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_n, gen_out);
    if (*comp) return cmd_compress(comp_in, comp_q, comp_out);
    if (*decomp) return cmd_decompress(decomp_in, decomp_out);
    if (*train) return cmd_train(train_config, train_ov, train_out, train_resume);
    if (*enc) return cmd_encode_dist(enc_orig, enc_comp, enc_ck, enc_out);
    if (*dec) return cmd_decode_dist(dec_in, dec_ck, dec_out, dec_comp);
    if (*ev) return cmd_eval(ev_ck, ev_ov, ev_out, ev_base_out, ev_plot);
    if (*bd) return cmd_bdrate(bd_anchor, bd_test);
    if (*oh) return cmd_overhead(oh_ck, oh_config, oh_ov, oh_h, oh_w);
    if (*ab) return cmd_ablate(ab_kind, ab_config, ab_ov, ab_out, ab_plot);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::kInvalidArgument: return kExitUsage;
      case ErrorKind::kData: return kExitData;
      case ErrorKind::kCheckpoint: return kExitCheckpoint;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
