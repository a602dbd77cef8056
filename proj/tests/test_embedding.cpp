#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "cdre/embedding.hpp"
#include "cdre/model.hpp"
#include "test_support.hpp"

using namespace cdre;
using namespace cdre::embedding;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

const Tensor& value(const nn::ParamStore& s, nn::ParamId id) { return s.at(id).value; }

void randomize(nn::ParamStore& s, nn::ParamId id, std::uint64_t seed) {
  if (id != nn::kNoParam) s.init_uniform(id, 0.5, seed);
}

// Step-by-step CNN branch: SA gate from mean/max of concat(f, d), 7x7 conv,
// gate d, squeeze, bottleneck, channel gate, 1x1 output conv.
Tensor cnn_branch_oracle(const nn::ParamStore& s, const CnnEmbed& e, const Tensor& f,
                         const Tensor& d) {
  const int C = f.dim(0), H = f.dim(1), W = f.dim(2);
  Tensor pooled({2, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double sum = 0.0, mx = -1e300;
      for (int c = 0; c < C; ++c) {
        sum += f.at(c, y, x) + d.at(c, y, x);
        mx = std::max({mx, f.at(c, y, x), d.at(c, y, x)});
      }
      pooled.at(0, y, x) = sum / (2 * C);
      pooled.at(1, y, x) = mx;
    }
  const Tensor& sw = value(s, e.spatial_conv().weight());
  const double sb = value(s, e.spatial_conv().bias()).data[0];
  Tensor sa({C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = sb;
      for (int ch = 0; ch < 2; ++ch)
        for (int ky = 0; ky < 7; ++ky)
          for (int kx = 0; kx < 7; ++kx) {
            const int yy = y + ky - 3, xx = x + kx - 3;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            acc += sw.data[(ch * 7 + ky) * 7 + kx] * pooled.at(ch, yy, xx);
          }
      const double g = sigmoid(acc);
      for (int c = 0; c < C; ++c) sa.at(c, y, x) = d.at(c, y, x) * g;
    }
  std::vector<double> sq(C, 0.0);
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) sq[c] += sa.at(c, y, x);
    sq[c] /= H * W;
  }
  const Tensor& w1 = value(s, e.ca_fc1().weight());
  const Tensor& b1 = value(s, e.ca_fc1().bias());
  const Tensor& w2 = value(s, e.ca_fc2().weight());
  const Tensor& b2 = value(s, e.ca_fc2().bias());
  const int hidden = w1.dim(0);
  std::vector<double> hid(hidden);
  for (int j = 0; j < hidden; ++j) {
    double acc = b1.data[j];
    for (int c = 0; c < C; ++c) acc += w1.at(j, c) * sq[c];
    hid[j] = std::max(acc, 0.0);
  }
  std::vector<double> gate(C);
  for (int c = 0; c < C; ++c) {
    double acc = b2.data[c];
    for (int j = 0; j < hidden; ++j) acc += w2.at(c, j) * hid[j];
    gate[c] = sigmoid(acc);
  }
  const Tensor& wo = value(s, e.out_conv().weight());
  const Tensor& bo = value(s, e.out_conv().bias());
  Tensor out({C, H, W});
  for (int o = 0; o < C; ++o)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = bo.data[o];
        for (int c = 0; c < C; ++c) acc += wo.data[o * C + c] * sa.at(c, y, x) * gate[c];
        out.at(o, y, x) = acc;
      }
  return out;
}

Tensor project(const Tensor& x, const Tensor& w, const Tensor* b) {
  const int N = x.dim(0), I = x.dim(1), O = w.dim(0);
  Tensor out({N, O});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      double acc = b ? b->data[o] : 0.0;
      for (int i = 0; i < I; ++i) acc += x.at(n, i) * w.at(o, i);
      out.at(n, o) = acc;
    }
  return out;
}

// Explicit two-head softmax attention with residual output projection.
Tensor attention_oracle(const nn::ParamStore& s, const TokenEmbed& e, const Tensor& f,
                        const Tensor& d) {
  const Tensor q = project(f, value(s, e.wq().weight()), nullptr);
  const Tensor k = project(d, value(s, e.wk().weight()), nullptr);
  const Tensor v = project(d, value(s, e.wv().weight()), nullptr);
  const int Nf = f.dim(0), Nd = d.dim(0), D = f.dim(1), dh = D / e.heads();
  Tensor mixed({Nf, D});
  for (int h = 0; h < e.heads(); ++h)
    for (int i = 0; i < Nf; ++i) {
      std::vector<double> logits(Nd);
      for (int j = 0; j < Nd; ++j) {
        double dot = 0.0;
        for (int c = 0; c < dh; ++c) dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        logits[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (int c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (int j = 0; j < Nd; ++j) acc += logits[j] / z * v.at(j, h * dh + c);
        mixed.at(i, h * dh + c) = acc;
      }
    }
  const Tensor& bo = value(s, e.out().bias());
  Tensor out = project(mixed, value(s, e.out().weight()), &bo);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += f.data[i];
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

} // namespace

TEST_CASE("CNN transform shapes and zero input") {
  nn::ParamStore s;
  CnnTransform t1(s, 0, 8, 16, 1), t2(s, 1, 16, 32, 1);
  nn::Context ctx(s, false);
  const auto d0 = ag::Var::constant(testing::random_tensor({8, 64, 64}, 2));
  const auto d1 = t1.forward(ctx, d0);
  CHECK(d1.shape() == Shape{16, 16, 16});
  CHECK(t2.forward(ctx, d1).shape() == Shape{32, 8, 8});
  const auto z = t1.forward(ctx, ag::Var::constant(Tensor({8, 64, 64})));
  for (double v : z.value().data) CHECK(v == 0.0);
}

TEST_CASE("CNN embed: identity at init, zero distortion, branch oracle") {
  nn::ParamStore s;
  CnnEmbed e(s, 1, 32, 3);
  const Tensor f = testing::random_tensor({32, 8, 8}, 4);
  const Tensor d = testing::random_tensor({32, 8, 8}, 5);
  {
    nn::Context ctx(s, false);
    CHECK(e.forward(ctx, ag::Var::constant(f), ag::Var::constant(d)).value() == f);
  }
  randomize(s, e.out_conv().weight(), 6);
  {
    nn::Context ctx(s, false);
    CHECK(e.forward(ctx, ag::Var::constant(f), ag::Var::constant(Tensor({32, 8, 8}))).value() == f);
  }
  randomize(s, e.out_conv().bias(), 7);
  nn::Context ctx(s, false);
  const auto br = e.branch(ctx, ag::Var::constant(f), ag::Var::constant(d)).value();
  CHECK(max_abs_diff(br, cnn_branch_oracle(s, e, f, d)) < 1e-6);
  const auto full = e.forward(ctx, ag::Var::constant(f), ag::Var::constant(d)).value();
  CHECK(full.shape == f.shape);
  CHECK_THROWS(e.forward(ctx, ag::Var::constant(f), ag::Var::constant(Tensor({32, 4, 4}))));
}

TEST_CASE("token transform: shapes, zero tokens and pass-through weights") {
  nn::ParamStore s;
  TokenTransform t(s, 1, 24, 48, 8);
  nn::Context ctx(s, false);
  CHECK(t.forward(ctx, ag::Var::constant(testing::random_tensor({4, 24}, 9))).shape() == Shape{4, 48});
  CHECK_THROWS(t.forward(ctx, ag::Var::constant(Tensor({4, 48}))));

  s.init_constant(t.mlp().fc1().bias(), 0.0);
  s.init_constant(t.mlp().fc2().bias(), 0.0);
  nn::Context zctx(s, false);
  const auto zero = t.forward(zctx, ag::Var::constant(Tensor({4, 24})));
  for (double v : zero.value().data) CHECK(v == 0.0);

  // relu(x) - relu(-x) = x with fc1 = [I; -I], fc2 = [I, -I].
  nn::ParamStore p;
  TokenTransform id(p, 0, 6, 6, 10);
  auto& w1 = p.at(id.mlp().fc1().weight()).value;
  auto& w2 = p.at(id.mlp().fc2().weight()).value;
  std::fill(w1.data.begin(), w1.data.end(), 0.0);
  std::fill(w2.data.begin(), w2.data.end(), 0.0);
  for (int i = 0; i < 6; ++i) {
    w1.at(i, i) = 1.0;
    w1.at(6 + i, i) = -1.0;
    w2.at(i, i) = 1.0;
    w2.at(i, 6 + i) = -1.0;
  }
  p.init_constant(id.mlp().fc1().bias(), 0.0);
  p.init_constant(id.mlp().fc2().bias(), 0.0);
  nn::Context ictx(p, false);
  const Tensor x = testing::random_tensor({5, 6}, 11);
  CHECK(max_abs_diff(id.forward(ictx, ag::Var::constant(x)).value(), x) == 0.0);
}

TEST_CASE("token embed: identity at init") {
  nn::ParamStore s;
  TokenEmbed e(s, 0, 24, 12);
  nn::Context ctx(s, false);
  const Tensor f = testing::random_tensor({16, 24}, 13);
  CHECK(e.forward(ctx, ag::Var::constant(f), ag::Var::constant(testing::random_tensor({4, 24}, 14))).value() == f);
}

TEST_CASE("token embed: a single key gets weight exactly 1") {
  nn::ParamStore s;
  TokenEmbed e(s, 0, 24, 15);
  randomize(s, e.out().weight(), 16);
  randomize(s, e.out().bias(), 17);
  nn::Context ctx(s, false);
  const Tensor f = testing::random_tensor({5, 24}, 18);
  const Tensor d = testing::random_tensor({1, 24}, 19);
  for (const auto& w : e.attention(ctx, ag::Var::constant(f), ag::Var::constant(d)))
    for (double v : w.data) CHECK(v == 1.0);
  const Tensor v = project(d, value(s, e.wv().weight()), nullptr);
  const Tensor& bo = value(s, e.out().bias());
  const Tensor pv = project(v, value(s, e.out().weight()), &bo);
  const auto out = e.forward(ctx, ag::Var::constant(f), ag::Var::constant(d)).value();
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 24; ++c) CHECK(out.at(i, c) == doctest::Approx(f.at(i, c) + pv.at(0, c)));
}

TEST_CASE("token embed: loop oracle, row sums and key permutation") {
  nn::ParamStore s;
  TokenEmbed e(s, 0, 24, 20);
  randomize(s, e.out().weight(), 21);
  randomize(s, e.out().bias(), 22);
  nn::Context ctx(s, false);
  const Tensor f = testing::random_tensor({3, 24}, 23);
  const Tensor d = testing::random_tensor({5, 24}, 24);
  const auto out = e.forward(ctx, ag::Var::constant(f), ag::Var::constant(d)).value();
  CHECK(max_abs_diff(out, attention_oracle(s, e, f, d)) < 1e-6);

  for (const auto& w : e.attention(ctx, ag::Var::constant(f), ag::Var::constant(d)))
    for (int i = 0; i < 3; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 5; ++j) sum += w.at(i, j);
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }

  Tensor perm({5, 24});
  const int order[5] = {3, 0, 4, 1, 2};
  for (int j = 0; j < 5; ++j)
    for (int c = 0; c < 24; ++c) perm.at(j, c) = d.at(order[j], c);
  const auto out_perm = e.forward(ctx, ag::Var::constant(f), ag::Var::constant(perm)).value();
  CHECK(max_abs_diff(out, out_perm) < 1e-12);

  CHECK_THROWS(e.forward(ctx, ag::Var::constant(f), ag::Var::constant(Tensor({5, 48}))));
  CHECK_THROWS(TokenEmbed(s, 3, 25, 1));
}

TEST_CASE("gradient check: CNN embed") {
  nn::ParamStore s;
  CnnEmbed e(s, 0, 16, 25);
  randomize(s, e.out_conv().weight(), 26);
  const Tensor probe = testing::random_tensor({16, 4, 4}, 27);
  const auto r = testing::check_gradients(
      [&](const std::vector<ag::Var>& in) {
        nn::Context ctx(s, false);
        return ag::sum(ag::mul(e.forward(ctx, in[0], in[1]), ag::Var::constant(probe)));
      },
      {testing::random_tensor({16, 4, 4}, 28), testing::random_tensor({16, 4, 4}, 29)});
  CHECK(r.checked == 512);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("gradient check: token embed and transform") {
  nn::ParamStore s;
  TokenEmbed e(s, 0, 8, 30);
  TokenTransform t(s, 0, 6, 8, 30);
  randomize(s, e.out().weight(), 31);
  const Tensor probe = testing::random_tensor({3, 8}, 32);
  const auto r = testing::check_gradients(
      [&](const std::vector<ag::Var>& in) {
        nn::Context ctx(s, false);
        const auto d = t.forward(ctx, in[1]);
        return ag::sum(ag::mul(e.forward(ctx, in[0], d), ag::Var::constant(probe)));
      },
      {testing::random_tensor({3, 8}, 33), testing::random_tensor({5, 6}, 34)});
  CHECK(r.checked == 54);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("depth validation and partial embedding") {
  for (int bad : {0, 5, -1}) CHECK_THROWS_WITH(validate_depth(bad), doctest::Contains("depth"));
  nn::ParamStore s;
  CHECK_THROWS(EmbeddingPipeline(s, tasks::BackboneSpec::cnn(), 0, 8, 1));
  EmbeddingPipeline p(s, tasks::BackboneSpec::cnn(), 1, 8, 1);
  nn::Context ctx(s, false);
  const auto set = p.transform(ctx, ag::Var::constant(testing::random_tensor({8, 64, 64}, 35)));
  REQUIRE(set.d.size() == 1);
  CHECK(set.d[0].shape() == Shape{16, 16, 16});
  CHECK_THROWS(p.embed(ctx, 1, ag::Var::constant(Tensor({32, 8, 8})), ag::Var::constant(Tensor({32, 8, 8}))));
  for (const auto& name : {"transform.stage2.conv.weight", "embed.stage2.out.weight"})
    CHECK_FALSE(s.contains(name));
  Embedder hook(p, set);
  const auto f2 = ag::Var::constant(testing::random_tensor({32, 8, 8}, 36));
  CHECK(hook.apply(ctx, 1, f2).value() == f2.value());
}

TEST_CASE("pipeline feature shapes match every backbone stage") {
  for (auto family : {tasks::Family::kCnn, tasks::Family::kTransformer}) {
    model::ModelConfig cfg;
    cfg.backbone = tasks::BackboneSpec::for_family(family);
    model::CdreModel m(cfg);
    nn::Context ctx(m.params(), false);
    const auto img = ag::Var::constant(testing::random_image(64, 64, 37));
    const auto plain = m.backbone().forward(ctx, img);
    Tensor bits({6, 2, 2});
    const auto set = m.embedding().transform(ctx, m.decode_feature(ctx, ag::Var::constant(bits), 64, 64));
    REQUIRE(set.d.size() == 4);
    for (int i = 0; i < 4; ++i) {
      CAPTURE(i);
      if (family == tasks::Family::kCnn) {
        CHECK(set.d[i].shape() == plain.stages[i].shape());
      } else {
        CHECK(set.d[i].dim(1) == plain.stages[i].dim(1));
        CHECK(set.d[i].dim(0) == 4);
      }
    }
  }
}

TEST_CASE("identity at init: embedded logits equal plain logits on 100 inputs") {
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
    CAPTURE(tasks::family_name(family));
    CHECK(equal == 100);
  }
}
