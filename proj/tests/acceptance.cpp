// Acceptance criteria runner: one PASS/FAIL line per criterion.
// Optional arguments restrict the run to criteria whose name contains any of them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cdre/base_codec.hpp"
#include "cdre/config.hpp"
#include "cdre/distortion_codec.hpp"
#include "cdre/embedding.hpp"
#include "cdre/evaluation.hpp"
#include "cdre/experiment.hpp"
#include "cdre/model.hpp"
#include "cdre/training.hpp"
#include "test_support.hpp"

using namespace cdre;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Outcome side_channel_rate() {
  const double bpp = distortion::side_bpp(6, 720, 1280);
  const double kbps = bpp * 1280 * 720 * 30 / 8 / 1000;
  const bool pass = std::fabs(bpp - 0.00599) <= 0.0001 && std::fabs(kbps - 20.0) <= 2.0;
  return {pass, "side_bpp=" + fmt("%.6f", bpp) + " kbytes_per_s=" + fmt("%.2f", kbps)};
}

Outcome encoder_params() {
  model::CdreModel m(model::ModelConfig{});
  const auto r = eval::overhead(m, 720, 1280);
  const auto n = r.encoder_side_params();
  return {n <= 20000, "encoder_side_params=" + std::to_string(n)};
}

Outcome encoder_macs() {
  model::CdreModel m(model::ModelConfig{});
  const double macs = eval::overhead(m, 720, 1280).encoder_side_macs_per_pixel();
  return {macs >= 400.0 && macs <= 1500.0, "encoder_side_macs_per_pixel=" + fmt("%.1f", macs)};
}

Outcome bitstream_exactness() {
  Rng rng(2024);
  int ok = 0;
  for (int i = 0; i < 1000; ++i) {
    distortion::BinaryRepresentation b;
    b.channels = 1 + static_cast<int>(rng.next() % 16);
    b.source_h = 1 + static_cast<int>(rng.next() % 800);
    b.source_w = 1 + static_cast<int>(rng.next() % 1400);
    b.latent_h = distortion::latent_size(b.source_h);
    b.latent_w = distortion::latent_size(b.source_w);
    b.bits.resize(static_cast<std::size_t>(b.channels) * b.latent_h * b.latent_w);
    for (auto& bit : b.bits) bit = static_cast<std::uint8_t>(rng.next() & 1);
    if (distortion::deserialize(distortion::serialize(b)) == b) ++ok;
  }
  struct Golden {
    const char* file;
    int channels, sh, sw, salt, mod;
  };
  const Golden goldens[] = {{"golden_c6_64x96.cdrd", 6, 64, 96, 0, 3},
                            {"golden_c3_100x200.cdrd", 3, 100, 200, 1, 2},
                            {"golden_c16_720x1280.cdrd", 16, 720, 1280, 2, 5}};
  int golden_ok = 0;
  for (const auto& g : goldens) {
    std::ifstream is(testing::data_dir() / g.file, std::ios::binary);
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(is), {}};
    const auto b = distortion::deserialize(bytes);
    bool match = b.channels == g.channels && b.source_h == g.sh && b.source_w == g.sw;
    for (int c = 0; match && c < b.channels; ++c)
      for (int y = 0; match && y < b.latent_h; ++y)
        for (int x = 0; match && x < b.latent_w; ++x)
          match = b.at(c, y, x) == ((c * 7 + y * 3 + x * 5 + g.salt) % g.mod == 0 ? 1 : 0);
    if (match && distortion::serialize(b) == bytes) ++golden_ok;
  }
  return {ok == 1000 && golden_ok == 3,
          "roundtrips=" + std::to_string(ok) + "/1000 goldens=" + std::to_string(golden_ok) + "/3"};
}

Outcome identity_at_init() {
  std::string detail;
  bool pass = true;
  for (auto family : {tasks::Family::kCnn, tasks::Family::kTransformer}) {
    model::ModelConfig cfg;
    cfg.backbone = tasks::BackboneSpec::for_family(family);
    cfg.seed = 5;
    model::CdreModel m(cfg);
    Rng rng(38);
    int equal = 0;
    for (int i = 0; i < 100; ++i) {
      const Tensor img = testing::random_image(64, 64, 1000 + i);
      distortion::BinaryRepresentation b{6, 2, 2, 64, 64, std::vector<std::uint8_t>(24)};
      for (auto& bit : b.bits) bit = static_cast<std::uint8_t>(rng.next() & 1);
      if (m.logits_with_bits(img, b) == m.logits_plain(img)) ++equal;
    }
    pass = pass && equal == 100;
    detail += std::string(detail.empty() ? "" : " ") + tasks::family_name(family) + "=" +
              std::to_string(equal) + "/100";
  }
  return {pass, detail};
}

eval::RateTaskCurve curve(std::vector<double> bpp, std::vector<double> metric) {
  eval::RateTaskCurve c;
  for (std::size_t i = 0; i < bpp.size(); ++i) c.points.push_back({bpp[i], metric[i], 0});
  return c;
}

Outcome bd_rate_oracles() {
  // tests/oracles/bd_rate_oracle.py
  const auto anchor = curve({0.10, 0.20, 0.40, 0.80}, {0.60, 0.68, 0.75, 0.81});
  const auto test = curve({0.07, 0.15, 0.31, 0.64}, {0.61, 0.69, 0.76, 0.82});
  constexpr double kTrapezoid = -31.8293247291;
  auto doubled = anchor;
  for (auto& p : doubled.points) p.bpp *= 2.0;
  const double self = eval::bd_rate(anchor, anchor);
  const double dbl = eval::bd_rate(anchor, doubled);
  const double fixture = eval::bd_rate(anchor, test);
  const bool pass = self == 0.0 && std::fabs(dbl - 100.0) <= 0.01 && std::fabs(fixture - kTrapezoid) <= 0.5;
  return {pass, "self=" + fmt("%.6f", self) + " doubled=" + fmt("%.4f", dbl) + " fixture=" +
                    fmt("%.4f", fixture) + " trapezoid=" + fmt("%.4f", kTrapezoid)};
}

void randomize(nn::ParamStore& s, nn::ParamId id, std::uint64_t seed) {
  if (id != nn::kNoParam) s.init_uniform(id, 0.5, seed);
}

Outcome gradient_checks() {
  const Tensor y = testing::random_tensor({2, 3, 3}, 4, -3.0, 3.0);
  const auto leaf = ag::Var::leaf(y, true);
  ag::backward(ag::sum(distortion::quantize_ste(leaf)));
  const auto g = leaf.grad();
  double ste = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double h = 1e-6;
    const double numeric = (sig(y.data[i] + h) - sig(y.data[i] - h)) / (2 * h);
    ste = std::max(ste, std::fabs(g[i] - numeric) / std::fabs(numeric));
  }

  nn::ParamStore s1;
  embedding::CnnEmbed ce(s1, 0, 16, 25);
  randomize(s1, ce.out_conv().weight(), 26);
  const Tensor probe1 = testing::random_tensor({16, 4, 4}, 27);
  const auto cnn = testing::check_gradients(
      [&](const std::vector<ag::Var>& in) {
        nn::Context ctx(s1, false);
        return ag::sum(ag::mul(ce.forward(ctx, in[0], in[1]), ag::Var::constant(probe1)));
      },
      {testing::random_tensor({16, 4, 4}, 28), testing::random_tensor({16, 4, 4}, 29)});

  nn::ParamStore s2;
  embedding::TokenEmbed te(s2, 0, 8, 30);
  embedding::TokenTransform tt(s2, 0, 6, 8, 30);
  randomize(s2, te.out().weight(), 31);
  const Tensor probe2 = testing::random_tensor({3, 8}, 32);
  const auto tok = testing::check_gradients(
      [&](const std::vector<ag::Var>& in) {
        nn::Context ctx(s2, false);
        const auto d = tt.forward(ctx, in[1]);
        return ag::sum(ag::mul(te.forward(ctx, in[0], d), ag::Var::constant(probe2)));
      },
      {testing::random_tensor({3, 8}, 33), testing::random_tensor({5, 6}, 34)});

  const bool pass = ste < 1e-4 && cnn.max_rel_error < 1e-4 && tok.max_rel_error < 1e-4;
  return {pass, "ste=" + fmt("%.2e", ste) + " cnn_embed=" + fmt("%.2e", cnn.max_rel_error) +
                    " token_embed=" + fmt("%.2e", tok.max_rel_error)};
}

Outcome freeze_contract() {
  model::CdreModel m(model::ModelConfig{});
  const auto backbone = m.params().group_hash("backbone");
  const auto head = m.params().group_hash("head");
  training::LossConfig c;
  c.regime = training::Regime::kFd;
  c.steps = 100;
  c.batch_size = 2;
  c.qualities = {10, 30};
  const training::TrainingData data(tasks::gen_dataset(11, 16), {10, 30});
  training::Trainer t(m, c, data);
  t.run();
  const bool pass = t.step_index() == 100 && m.params().group_hash("backbone") == backbone &&
                    m.params().group_hash("head") == head;
  return {pass, "steps=" + std::to_string(t.step_index()) + " backbone_hash=" +
                    training::hex64(m.params().group_hash("backbone")) + " head_hash=" +
                    training::hex64(m.params().group_hash("head"))};
}

double reg_oracle(const Tensor& a, const Tensor& b) {
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  double total = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int c = 0; c < C; ++c) {
        dot += a.at(c, y, x) * b.at(c, y, x);
        na += a.at(c, y, x) * a.at(c, y, x);
        nb += b.at(c, y, x) * b.at(c, y, x);
      }
      total += dot / (std::sqrt(na) * std::sqrt(nb));
    }
  return 1.0 + total / (H * W);
}

Outcome loss_structure() {
  sensitive::FeaturePyramid po, pc;
  const Shape shapes[3] = {{8, 8, 8}, {16, 4, 4}, {24, 2, 2}};
  for (std::size_t i = 0; i < 3; ++i) {
    po.levels[i] = ag::Var::constant(testing::random_tensor(shapes[i], 10 + i));
    pc.levels[i] = ag::Var::constant(testing::random_tensor(shapes[i], 20 + i));
  }
  double worst = 0.0;
  bool bounded = true;
  for (double lambda : {0.0, 0.1, 4.0}) {
    const auto b = training::cdre_loss(1.25, po, pc, lambda);
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double ref = reg_oracle(po[i].value(), pc[i].value());
      worst = std::max(worst, std::fabs(b.distortion_reg[i] - ref));
      bounded = bounded && b.distortion_reg[i] >= 0.0 && b.distortion_reg[i] <= 2.0;
      sum += ref;
    }
    worst = std::max(worst, std::fabs(b.total - (1.25 + lambda * sum)));
  }
  return {bounded && worst < 1e-6, "max_abs_error=" + fmt("%.2e", worst) +
                                       (bounded ? " terms_in_[0,2]" : " term_out_of_range")};
}

Outcome directional_effectiveness() {
  const int q = 10;
  const std::vector<int> qualities{q};
  double cdre_sum = 0.0, base_sum = 0.0, max_overhead = 0.0;
  std::ostringstream per_seed;
  for (std::uint64_t seed : {0, 1, 2}) {
    config::RunConfig cfg;
    cfg.seed = seed;
    const auto splits = experiment::make_splits(cfg);
    const training::TrainingData data(splits.train, cfg.codec.train_qualities);
    auto run = experiment::train_run(cfg, data);
    const auto cdre_curve = eval::rate_task_curve(*run.model, qualities, splits.eval, true, true, "cdre");
    const auto base_curve = eval::rate_task_curve(*run.model, qualities, splits.eval, false, false, "baseline");
    const double acc = cdre_curve.points[0].metric, base = base_curve.points[0].metric;
    const double overhead = cdre_curve.points[0].bpp - base_curve.points[0].bpp;
    cdre_sum += acc;
    base_sum += base;
    max_overhead = std::max(max_overhead, overhead);
    per_seed << " seed" << seed << "=" << fmt("%.4f", acc) << "/" << fmt("%.4f", base);
    std::fprintf(stderr, "directional seed %llu: cdre %.4f baseline %.4f overhead %.6f\n",
                 static_cast<unsigned long long>(seed), acc, base, overhead);
  }
  const double cdre_mean = cdre_sum / 3, base_mean = base_sum / 3;
  return {cdre_mean >= base_mean && max_overhead <= 0.007,
          "q=10 cdre_mean=" + fmt("%.4f", cdre_mean) + " baseline_mean=" + fmt("%.4f", base_mean) +
              " max_overhead_bpp=" + fmt("%.6f", max_overhead) + per_seed.str()};
}

Outcome codec_monotonicity() {
  const auto corpus = experiment::read_dataset(testing::data_dir() / "corpus");
  double prev_bpp = 0.0, prev_psnr = 0.0;
  bool pass = corpus.size() == 20;
  std::ostringstream detail;
  detail << "images=" << corpus.size();
  for (int q : {10, 30, 50, 70, 90}) {
    double bpp = 0.0, ps = 0.0;
    for (const auto& s : corpus) {
      const auto p = codec::compress(s.image, codec::CodecQuality(q));
      bpp += p.base_bpp / corpus.size();
      ps += codec::psnr(s.image, p.compressed) / corpus.size();
    }
    pass = pass && bpp >= prev_bpp && ps >= prev_psnr;
    detail << " q" << q << "=" << fmt("%.3f", bpp) << "bpp/" << fmt("%.2f", ps) << "dB";
    prev_bpp = bpp;
    prev_psnr = ps;
  }
  return {pass, detail.str()};
}

} // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"side_channel_rate_budget", side_channel_rate},
      {"encoder_parameter_budget", encoder_params},
      {"encoder_compute_budget", encoder_macs},
      {"bitstream_exactness", bitstream_exactness},
      {"identity_at_initialization", identity_at_init},
      {"bd_rate_oracles", bd_rate_oracles},
      {"gradient_correctness", gradient_checks},
      {"freeze_contract", freeze_contract},
      {"loss_structure", loss_structure},
      {"directional_effectiveness", directional_effectiveness},
      {"codec_monotonicity", codec_monotonicity},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    bool selected = argc < 2;
    for (int i = 1; i < argc; ++i) selected = selected || name.find(argv[i]) != std::string::npos;
    if (!selected) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
