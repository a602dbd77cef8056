#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "cdre/sensitive_extractor.hpp"
#include "test_support.hpp"

using namespace cdre;
using sensitive::FeaturePyramid;

namespace {

FeaturePyramid pyramid_of(std::array<Tensor, 3> levels) {
  FeaturePyramid p;
  for (std::size_t i = 0; i < 3; ++i) p.levels[i] = ag::Var::constant(std::move(levels[i]));
  return p;
}

FeaturePyramid random_pyramid(std::uint64_t seed) {
  return pyramid_of({testing::random_tensor({8, 32, 32}, seed),
                     testing::random_tensor({16, 16, 16}, seed + 1),
                     testing::random_tensor({24, 8, 8}, seed + 2)});
}

FeaturePyramid scaled(const FeaturePyramid& p, double s) {
  std::array<Tensor, 3> levels;
  for (std::size_t i = 0; i < 3; ++i) {
    levels[i] = p[i].value();
    for (double& v : levels[i].data) v *= s;
  }
  return pyramid_of(levels);
}

// Straight loop: per location cosine over channels, averaged, negated.
double loop_distortion(const Tensor& a, const Tensor& b) {
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
      total += dot / (std::max(std::sqrt(na), 1e-8) * std::max(std::sqrt(nb), 1e-8));
    }
  return -total / (H * W);
}

struct Fixture {
  nn::ParamStore store;
  sensitive::SensitiveExtractor extractor{store, 11};
};

} // namespace

TEST_CASE("pyramid shapes for a 64x64 frame") {
  Fixture f;
  nn::Context ctx(f.store, false);
  const auto p = f.extractor.extract(ctx, ag::Var::constant(testing::random_image(64, 64, 1)));
  CHECK(p[0].shape() == Shape{8, 32, 32});
  CHECK(p[1].shape() == Shape{16, 16, 16});
  CHECK(p[2].shape() == Shape{24, 8, 8});
}

TEST_CASE("odd sizes halve with ceiling division") {
  Fixture f;
  nn::Context ctx(f.store, false);
  const auto p = f.extractor.extract(ctx, ag::Var::constant(testing::random_image(37, 45, 2)));
  CHECK(p[0].shape() == Shape{8, 19, 23});
  CHECK(p[1].shape() == Shape{16, 10, 12});
  CHECK(p[2].shape() == Shape{24, 5, 6});
  for (const auto& l : p.levels) CHECK(all_finite(l.value().data));
}

TEST_CASE("extraction is deterministic") {
  Fixture f;
  const auto img = ag::Var::constant(testing::random_image(32, 48, 3));
  nn::Context a(f.store, false), b(f.store, false);
  const auto pa = f.extractor.extract(a, img);
  const auto pb = f.extractor.extract(b, img);
  for (std::size_t i = 0; i < 3; ++i) CHECK(pa[i].value() == pb[i].value());

  nn::ParamStore other;
  sensitive::SensitiveExtractor same_seed(other, 11);
  nn::Context c(other, false);
  CHECK(same_seed.extract(c, img)[2].value() == pa[2].value());
}

TEST_CASE("inputs below 8x8 are rejected") {
  Fixture f;
  nn::Context ctx(f.store, false);
  CHECK_THROWS_WITH(f.extractor.extract(ctx, ag::Var::constant(testing::random_image(7, 64, 4))),
                    doctest::Contains("input below minimum size"));
  CHECK_NOTHROW(f.extractor.extract(ctx, ag::Var::constant(testing::random_image(8, 8, 4))));
}

TEST_CASE("all-zero weights give all-zero levels") {
  Fixture f;
  for (std::size_t i = 0; i < f.store.size(); ++i) f.store.init_constant(i, 0.0);
  nn::Context ctx(f.store, false);
  const auto p = f.extractor.extract(ctx, ag::Var::constant(testing::random_image(64, 64, 5)));
  for (const auto& l : p.levels)
    for (double v : l.value().data) CHECK(v == 0.0);
}

TEST_CASE("identical features give D = -1 at every scale") {
  const auto p = random_pyramid(21);
  const auto d = sensitive::feature_distortion(p, p);
  for (double v : d.per_scale) CHECK(v == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("orthogonal features give D = 0") {
  std::array<Tensor, 3> a, b;
  const Shape shapes[3] = {{8, 32, 32}, {16, 16, 16}, {24, 8, 8}};
  for (std::size_t i = 0; i < 3; ++i) {
    a[i] = Tensor(shapes[i]);
    b[i] = Tensor(shapes[i]);
    for (int y = 0; y < shapes[i][1]; ++y)
      for (int x = 0; x < shapes[i][2]; ++x) {
        a[i].at(0, y, x) = 1.0 + y;
        b[i].at(1, y, x) = 2.0 + x;
      }
  }
  const auto d = sensitive::feature_distortion(pyramid_of(a), pyramid_of(b));
  for (double v : d.per_scale) CHECK(v == 0.0);
}

TEST_CASE("distortion matches a per-location loop") {
  for (std::uint64_t seed : {31, 32, 33}) {
    const auto po = random_pyramid(seed);
    const auto pc = random_pyramid(seed + 100);
    const auto d = sensitive::feature_distortion(po, pc);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(std::fabs(d.per_scale[i] - loop_distortion(po[i].value(), pc[i].value())) < 1e-6);
  }
}

TEST_CASE("distortion is invariant to positive rescaling and bounded") {
  const auto po = random_pyramid(41);
  const auto pc = random_pyramid(141);
  const auto d = sensitive::feature_distortion(po, pc);
  const auto ds = sensitive::feature_distortion(scaled(po, 3.5), scaled(pc, 0.02));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ds.per_scale[i] == doctest::Approx(d.per_scale[i]).epsilon(1e-12));
    CHECK(d.per_scale[i] >= -1.0);
    CHECK(d.per_scale[i] <= 1.0);
  }
  const auto anti = sensitive::feature_distortion(po, scaled(po, -1.0));
  for (double v : anti.per_scale) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("pyramid shape mismatch is rejected") {
  const auto a = random_pyramid(51);
  auto b = random_pyramid(52);
  b.levels[1] = ag::Var::constant(testing::random_tensor({16, 8, 8}, 53));
  CHECK_THROWS_WITH(sensitive::feature_distortion(a, b), doctest::Contains("scale 2"));
}

TEST_CASE("siamese parameter budget") {
  Fixture f;
  const auto before = f.store.count("extractor");
  CHECK(before == f.store.total_count());
  CHECK(before <= 6000);
  nn::Context ctx(f.store, false);
  f.extractor.extract(ctx, ag::Var::constant(testing::random_image(64, 64, 6)));
  f.extractor.extract(ctx, ag::Var::constant(testing::random_image(64, 64, 7)));
  CHECK(f.store.count("extractor") == before);
  // 3*8*9 + 8*16*9 + 16*24*9 weights; no conv bias, no norm affine.
  CHECK(before == 4824);
}

TEST_CASE("extractor MACs per image at 720p") {
  Fixture f;
  // 216/4 + 1152/16 + 3456/64
  CHECK(f.extractor.macs(720, 1280) / (720.0 * 1280.0) == doctest::Approx(180.0));
}
