#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "cdre/distortion_codec.hpp"
#include "cdre/error.hpp"
#include "cdre/evaluation.hpp"
#include "test_support.hpp"

using namespace cdre;
using namespace cdre::eval;

namespace {

RateTaskCurve curve(std::string label, std::vector<double> bpp, std::vector<double> metric) {
  RateTaskCurve c;
  c.label = std::move(label);
  for (std::size_t i = 0; i < bpp.size(); ++i) c.points.push_back({bpp[i], metric[i], 0});
  return c;
}

// tests/oracles/bd_rate_oracle.py
const RateTaskCurve kAnchor = curve("anchor", {0.10, 0.20, 0.40, 0.80}, {0.60, 0.68, 0.75, 0.81});
const RateTaskCurve kTest = curve("test", {0.07, 0.15, 0.31, 0.64}, {0.61, 0.69, 0.76, 0.82});
constexpr double kTrapezoidBd = -31.8293247291;

RateTaskCurve scaled(RateTaskCurve c, double k) {
  for (auto& p : c.points) p.bpp *= k;
  return c;
}

} // namespace

TEST_CASE("bd-rate of a curve against itself is exactly zero") {
  CHECK(bd_rate(kAnchor, kAnchor) == 0.0);
  CHECK(bd_rate(kTest, kTest) == 0.0);
}

TEST_CASE("constant rate scaling gives (k - 1) * 100") {
  CHECK(std::fabs(bd_rate(kAnchor, scaled(kAnchor, 2.0)) - 100.0) < 0.01);
  CHECK(std::fabs(bd_rate(kAnchor, scaled(kAnchor, 0.5)) + 50.0) < 0.01);
  CHECK(std::fabs(bd_rate(kTest, scaled(kTest, 1.3)) - 30.0) < 0.01);
}

TEST_CASE("cubic bd-rate agrees with the trapezoid oracle") {
  const double v = bd_rate(kAnchor, kTest);
  MESSAGE("bd_rate " << v);
  CHECK(std::fabs(v - kTrapezoidBd) < 0.5);
  CHECK(v < 0.0);
}

TEST_CASE("bd-rate ignores point order") {
  auto shuffled = kTest;
  std::swap(shuffled.points[0], shuffled.points[3]);
  std::swap(shuffled.points[1], shuffled.points[2]);
  CHECK(bd_rate(kAnchor, shuffled) == doctest::Approx(bd_rate(kAnchor, kTest)).epsilon(1e-12));
}

TEST_CASE("bd-rate errors") {
  const auto far = curve("far", {0.1, 0.2, 0.4, 0.8}, {0.1, 0.2, 0.3, 0.4});
  CHECK_THROWS_WITH(bd_rate(kAnchor, far), doctest::Contains("disjoint quality ranges"));
  const auto wobble = curve("wobble", {0.1, 0.2, 0.4, 0.8}, {0.6, 0.7, 0.65, 0.8});
  CHECK_THROWS_WITH(bd_rate(kAnchor, wobble), doctest::Contains("non-monotonic metric"));
  const auto three = curve("three", {0.1, 0.2, 0.4}, {0.6, 0.7, 0.8});
  CHECK_THROWS(bd_rate(kAnchor, three));
  const auto repeated = curve("rep", {0.1, 0.1, 0.4, 0.8}, {0.6, 0.7, 0.75, 0.8});
  CHECK_THROWS(bd_rate(kAnchor, repeated));
  try {
    bd_rate(kAnchor, far);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kData);
  }
}

TEST_CASE("count_params and macs_per_pixel on single convs") {
  nn::ParamStore s;
  nn::Conv2d a(s, "a.conv", 3, 8, 3, 2, 1, false, 1);
  nn::Conv2d b(s, "b.conv", 3, 8, 3, 1, 1, true, 1);
  CHECK(count_params(s, "a") == 216);
  CHECK(count_params(s, "b") == 224);
  CHECK(macs_per_pixel(a.macs(64, 64), 64, 64) == 54.0);
  CHECK(macs_per_pixel(b.macs(64, 64), 64, 64) == 216.0);
  CHECK_THROWS(macs_per_pixel(1.0, 0, 5));
}

TEST_CASE("overhead matches the frozen architecture audit") {
  // tests/oracles/architecture_audit.py
  std::ifstream is(testing::data_dir() / "architecture_audit.json");
  const auto audit = nlohmann::json::parse(is);
  REQUIRE(audit.size() == 3);
  for (const auto& entry : audit) {
    const int H = entry["height"], W = entry["width"];
    CAPTURE(H);
    model::ModelConfig mc;
    mc.latent_channels = entry["latent_channels"];
    mc.embedding_depth = entry["depth"];
    model::CdreModel m(mc);
    const auto r = overhead(m, H, W);
    for (const auto& [group, n] : entry["params"].items()) {
      CAPTURE(group);
      CHECK(r.params_by_group.at(group) == n.get<std::size_t>());
      CHECK(count_params(m.params(), group) == n.get<std::size_t>());
    }
    for (const auto& [group, v] : entry["macs_per_pixel"].items()) {
      CAPTURE(group);
      CHECK(r.macs_per_pixel_by_group.at(group) == doctest::Approx(v.get<double>()).epsilon(1e-12));
    }
    CHECK(r.side_bpp == doctest::Approx(entry["side_bpp"].get<double>()).epsilon(1e-12));
  }
}

TEST_CASE("encoder-side budget at 720p") {
  model::CdreModel m(model::ModelConfig{});
  const auto r = overhead(m, 720, 1280);
  CHECK(r.encoder_side_params() == 15258);
  CHECK(r.encoder_side_params() <= 20000);
  CHECK(r.encoder_side_macs_per_pixel() >= 400.0);
  CHECK(r.encoder_side_macs_per_pixel() <= 1500.0);
  CHECK(r.side_bpp == 5520.0 / 921600.0);
}

TEST_CASE("analytic MACs agree with the counted MACs of a forward pass") {
  model::CdreModel m(model::ModelConfig{});
  const int H = 64, W = 96;
  const auto r = overhead(m, H, W);
  const codec::ImagePair pair{testing::random_image(H, W, 1), testing::random_image(H, W, 2), 0.0};
  ag::reset_mac_counter();
  m.encode_latent(pair);
  const double counted = static_cast<double>(ag::mac_counter()) / (H * W);
  CHECK(counted == doctest::Approx(r.encoder_side_macs_per_pixel()).epsilon(1e-9));

  nn::ParamStore s;
  sensitive::SensitiveExtractor ex(s, 1);
  nn::Context ctx(s, false);
  ag::reset_mac_counter();
  ex.extract(ctx, ag::Var::constant(pair.original));
  CHECK(static_cast<double>(ag::mac_counter()) == ex.macs(H, W));
}

TEST_CASE("rate-task curves: monotone baseline rate and side-channel additivity") {
  model::CdreModel m(model::ModelConfig{});
  const auto data = tasks::gen_dataset(5, 12);
  const std::vector<int> qs{10, 30, 50, 70};
  const auto base = rate_task_curve(m, qs, data, true, false, "baseline");
  const auto with = rate_task_curve(m, qs, data, true, true, "cdre");
  const auto without = rate_task_curve(m, qs, data, false, true, "cdre_noside");
  REQUIRE(base.points.size() == 4);
  const double side = distortion::side_bpp(6, 64, 64);
  for (std::size_t i = 0; i < 4; ++i) {
    CAPTURE(i);
    if (i > 0) CHECK(base.points[i].bpp > base.points[i - 1].bpp);
    CHECK(base.points[i].quality == qs[i]);
    CHECK(with.points[i].bpp == doctest::Approx(base.points[i].bpp + side).epsilon(1e-14));
    CHECK(without.points[i].bpp == base.points[i].bpp);
    CHECK(with.points[i].bpp - without.points[i].bpp == doctest::Approx(side).epsilon(1e-12));
    // Zero-init embeddings: the untrained CDRE path predicts like the baseline.
    CHECK(with.points[i].metric == base.points[i].metric);
    CHECK(base.points[i].metric >= 0.0);
    CHECK(base.points[i].metric <= 1.0);
  }
  const auto again = rate_task_curve(m, qs, data, true, true, "cdre");
  for (std::size_t i = 0; i < 4; ++i) CHECK(again.points[i].metric == with.points[i].metric);
  CHECK_THROWS(rate_task_curve(m, std::vector<int>{}, data, true, true, "x"));
}

TEST_CASE("curve files roundtrip through JSON and CSV") {
  auto c = kTest;
  c.config_hash = "0123456789abcdef";
  c.points[1].quality = 30;
  const auto dir = std::filesystem::temp_directory_path() / "cdre_test_curves";
  std::filesystem::create_directories(dir);
  for (const char* name : {"c.json", "c.csv"}) {
    CAPTURE(name);
    write_curve(dir / name, c);
    const auto back = read_curve(dir / name);
    CHECK(back.label == c.label);
    CHECK(back.config_hash == c.config_hash);
    REQUIRE(back.points.size() == c.points.size());
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      CHECK(back.points[i].bpp == c.points[i].bpp);
      CHECK(back.points[i].metric == c.points[i].metric);
      CHECK(back.points[i].quality == c.points[i].quality);
    }
  }
  CHECK(curve_to_csv(c).rfind("# config_hash=0123456789abcdef\nlabel,bpp,metric,quality\n", 0) == 0);
  {
    std::ofstream os(dir / "bad.json");
    os << "{\"label\": 3}";
  }
  CHECK_THROWS(read_curve(dir / "bad.json"));
  const RateTaskCurve both[] = {kAnchor, kTest};
  const auto plot = plot_data(both);
  CHECK(plot.find("# anchor") != std::string::npos);
  CHECK(plot.find("\n\n\n# test") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation variants: row order and changed fields") {
  const config::RunConfig base;
  auto names = [](const std::vector<AblationVariant>& v) {
    std::vector<std::string> out;
    for (const auto& x : v) out.push_back(x.name);
    return out;
  };
  const auto channels = ablation_variants(AblationKind::kChannels, base);
  CHECK(names(channels) ==
        std::vector<std::string>{"channels_1", "channels_3", "channels_6", "channels_10", "channels_16"});
  const int expected_c[] = {1, 3, 6, 10, 16};
  for (std::size_t i = 0; i < channels.size(); ++i) {
    CHECK(channels[i].config.cdre.channels == expected_c[i]);
    const auto diff = config::diff_fields(base, channels[i].config);
    if (expected_c[i] == base.cdre.channels) {
      CHECK(diff.empty());
    } else {
      CHECK(diff == std::vector<std::string>{"cdre.channels"});
      CHECK(config::config_hash(channels[i].config) != config::config_hash(base));
    }
  }

  const auto depth = ablation_variants(AblationKind::kEmbeddingDepth, base);
  CHECK(names(depth) == std::vector<std::string>{"depth_1", "depth_2", "depth_3", "depth_4"});
  for (std::size_t i = 0; i < depth.size(); ++i) {
    CHECK(depth[i].config.cdre.depth == static_cast<int>(i) + 1);
    const auto diff = config::diff_fields(base, depth[i].config);
    CHECK(diff.size() == (depth[i].config.cdre.depth == base.cdre.depth ? 0u : 1u));
  }

  const auto parts = ablation_variants(AblationKind::kExtractorParts, base);
  CHECK(names(parts) ==
        std::vector<std::string>{"no_cosine", "single_scale", "single_scale_no_cosine", "concat_fusion"});
  CHECK(config::diff_fields(base, parts[0].config) == std::vector<std::string>{"cdre.cosine_term"});
  CHECK(config::diff_fields(base, parts[1].config) == std::vector<std::string>{"cdre.multi_scale"});
  CHECK(config::diff_fields(base, parts[2].config).size() == 2);
  CHECK(config::diff_fields(base, parts[3].config) == std::vector<std::string>{"cdre.modulation"});

  CHECK_THROWS(parse_ablation_kind("widths"));
  CHECK(parse_ablation_kind("embedding_depth") == AblationKind::kEmbeddingDepth);
  CHECK(ablation_kind_name(AblationKind::kChannels) == "channels");
}
