#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "ugformer/attention.hpp"
#include "ugformer/deform_conv.hpp"
#include "ugformer/etb.hpp"
#include "ugformer/gcn.hpp"
#include "ugformer/network.hpp"

using namespace ugformer;

namespace {

template <typename T>
void zero(Param<T>& p) {
  p.value.fill(T(0));
}

template <typename Fn>
ErrorKind error_kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an ugformer::Error");
  return ErrorKind::IoError;
}

// Zero offsets, unit running statistics: batch norm reduces to a fixed scale.
template <typename T>
void unit_stats(BatchNorm2d<T>& bn) {
  bn.running_mean.value.fill(T(0));
  bn.running_var.value.fill(T(1));
  bn.gamma.value.fill(T(1));
  bn.beta.value.fill(T(0));
}

}  // namespace

TEST_CASE("stem halves the spatial dims and embeds to C0 channels") {
  Stem<float> stem(1, 32, ParamInit(1), "stem");
  std::mt19937_64 rng(1);
  const auto y = stem.forward(oracle::random_tensor<float>({1, 1, 64, 64}, rng, 0, 1), Mode::Train);
  CHECK(y.dims() == Shape{1, 32, 32, 32});
  CHECK(y.all_finite());
}

TEST_CASE("stem of a zero image with zero bias and unit statistics is zero") {
  Stem<double> stem(1, 8, ParamInit(2), "stem");
  zero(stem.unit.conv.bias);
  unit_stats(stem.unit.norm);
  const auto y = stem.forward(Tensor<double>({2, 1, 8, 8}), Mode::Eval);
  CHECK(std::all_of(y.values().begin(), y.values().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("stem convolution of a ramp with an all-ones kernel matches a direct convolution") {
  Stem<double> stem(1, 1, ParamInit(3), "stem");
  stem.unit.conv.weight.value.fill(1.0);
  zero(stem.unit.conv.bias);
  unit_stats(stem.unit.norm);
  Tensor<double> x({1, 1, 4, 4});
  std::iota(x.values().begin(), x.values().end(), 0.0);
  const auto expected = oracle::conv2d(x, Tensor<double>({1, 1, 3, 3}, 1.0), Tensor<double>({1}), 2, 1);
  // Hand-checked corner: taps (0,0),(0,1),(1,0),(1,1) of the ramp.
  CHECK(expected(0, 0, 0, 0) == doctest::Approx(0 + 1 + 4 + 5));
  const auto y = stem.forward(x, Mode::Eval);
  REQUIRE(y.dims() == Shape{1, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y[i] == doctest::Approx(oracle::gelu(expected[i]) / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  }
}

TEST_CASE("stem rejects odd or non-finite input") {
  Stem<float> stem(1, 4, ParamInit(1), "stem");
  CHECK(error_kind_of([&] { stem.forward(Tensor<float>({1, 1, 7, 8}), Mode::Train); }) == ErrorKind::OddSpatialDim);
  Tensor<float> bad({1, 1, 4, 4});
  bad[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK(error_kind_of([&] { stem.forward(bad, Mode::Train); }) == ErrorKind::NonFiniteInput);
}

TEST_CASE("patch aggregation") {
  SUBCASE("shape contract") {
    PatchAggregation<float> pa(32, ParamInit(1), "pa");
    CHECK(pa.forward(Tensor<float>({1, 32, 32, 32}, 0.5f)).dims() == Shape{1, 64, 16, 16});
  }
  SUBCASE("constant input with an all-ones kernel sums the window") {
    PatchAggregation<double> pa(1, ParamInit(1), "pa");
    pa.conv = Conv2d<double>(1, 1, 2, 2, 0, ParamInit(1), "c");
    pa.conv.weight.value.fill(1.0);
    zero(pa.conv.bias);
    const auto y = pa.forward(Tensor<double>({1, 1, 4, 4}, 2.5));
    for (double v : y.values()) CHECK(v == 10.0);
  }
  SUBCASE("random input matches the direct window oracle") {
    std::mt19937_64 rng(4);
    PatchAggregation<double> pa(2, ParamInit(4), "pa");
    const auto x = oracle::random_tensor<double>({2, 2, 4, 4}, rng);
    const auto expected = oracle::conv2d(x, pa.conv.weight.value, pa.conv.bias.value, 2, 0);
    CHECK(max_abs_diff(pa.forward(x), expected) <= 1e-6);
  }
  SUBCASE("odd input") {
    PatchAggregation<float> pa(2, ParamInit(1), "pa");
    CHECK(error_kind_of([&] { pa.forward(Tensor<float>({1, 2, 5, 4})); }) == ErrorKind::OddSpatialDim);
  }
}

TEST_CASE("conv2d matches the direct oracle for stride, padding and 1x1 kernels") {
  std::mt19937_64 rng(5);
  for (auto [k, s, p] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}, std::tuple{2, 2, 0}}) {
    Conv2d<double> conv(3, 4, k, s, p, ParamInit(5), "c");
    const auto x = oracle::random_tensor<double>({2, 3, 6, 6}, rng);
    CHECK(max_abs_diff(conv.forward(x), oracle::conv2d(x, conv.weight.value, conv.bias.value, s, p)) <= 1e-12);
  }
}

TEST_CASE("multi-head self-attention") {
  std::mt19937_64 rng(6);
  SUBCASE("a single token attends to itself with weight 1") {
    MultiHeadSelfAttention<double> mhsa(4, 2, ParamInit(6), "m");
    const auto x = oracle::random_tensor<double>({1, 4, 1, 1}, rng);
    const auto y = mhsa.forward(x);
    for (std::size_t o = 0; o < 4; ++o) {
      double expect = 0;
      for (std::size_t m = 0; m < 4; ++m) {
        double v = 0;
        for (std::size_t c = 0; c < 4; ++c) v += x[c] * mhsa.w_v.value(c, m);
        expect += v * mhsa.w_o.value(m, o);
      }
      CHECK(y[o] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("identical tokens give identical outputs") {
    MultiHeadSelfAttention<double> mhsa(4, 2, ParamInit(7), "m");
    auto x = oracle::random_tensor<double>({1, 4, 1, 3}, rng);
    for (std::size_t c = 0; c < 4; ++c) x(0, c, 0, 2) = x(0, c, 0, 0);
    const auto y = mhsa.forward(x);
    for (std::size_t c = 0; c < 4; ++c) CHECK(y(0, c, 0, 0) == y(0, c, 0, 2));
  }
  SUBCASE("two tokens, identity projections: by-hand softmax") {
    MultiHeadSelfAttention<double> mhsa(2, 1, ParamInit(8), "m");
    for (auto* w : {&mhsa.w_q, &mhsa.w_k, &mhsa.w_v, &mhsa.w_o}) {
      w->value.fill(0.0);
      w->value(0, 0) = w->value(1, 1) = 1.0;
    }
    const double t[2][2] = {{0.3, -1.2}, {0.8, 0.5}};
    Tensor<double> x({1, 2, 1, 2});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 2; ++c) x(0, c, 0, n) = t[n][c];
    const auto y = mhsa.forward(x);
    for (std::size_t i = 0; i < 2; ++i) {
      double s[2], z = 0;
      for (std::size_t j = 0; j < 2; ++j) {
        s[j] = std::exp((t[i][0] * t[j][0] + t[i][1] * t[j][1]) / std::sqrt(2.0));
        z += s[j];
      }
      for (std::size_t c = 0; c < 2; ++c) {
        const double expect = (s[0] * t[0][c] + s[1] * t[1][c]) / z;
        CHECK(y(0, c, 0, i) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
  SUBCASE("heads must divide channels") {
    CHECK(error_kind_of([] { MultiHeadSelfAttention<float>(6, 4, ParamInit(1), "m"); }) == ErrorKind::HeadMismatch);
  }
}

TEST_CASE("deformable convolution with zero offset parameters equals standard convolution (100 cases)") {
  std::mt19937_64 rng(9);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t cin = 1 + rng() % 3, cout = 1 + rng() % 3, h = 2 + rng() % 6, w = 2 + rng() % 6;
    DeformConv2d<double> dc(cin, cout, ParamInit(100 + trial), "dc");
    const auto x = oracle::random_tensor<double>({1 + rng() % 2, cin, h, w}, rng);
    const auto expected = oracle::conv2d(x, dc.weight.value, dc.bias.value, 1, 1);
    worst = std::max(worst, max_abs_diff(dc.forward(x), expected));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("deformable convolution on a constant image ignores interior offsets") {
  DeformConv2d<double> moved(2, 3, ParamInit(10), "dc");
  DeformConv2d<double> still(2, 3, ParamInit(10), "dc");
  for (std::size_t k = 0; k < 18; ++k) moved.offset_conv.bias.value[k] = k % 2 ? -0.35 : 0.6;
  const Tensor<double> x({1, 2, 9, 9}, 0.7);
  const auto a = moved.forward(x), b = still.forward(x);
  // Taps reach at most 1.6 pixels from the centre, so rows/cols 2..6 read only interior samples.
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 2; i <= 6; ++i)
      for (std::size_t j = 2; j <= 6; ++j) CHECK(a(0, o, i, j) == doctest::Approx(b(0, o, i, j)).epsilon(1e-12));
}

TEST_CASE("deformable convolution taps follow the scalar bilinear oracle") {
  std::mt19937_64 rng(11);
  DeformConv2d<double> dc(1, 1, ParamInit(11), "dc");
  dc.weight.value.fill(0.0);
  zero(dc.bias);
  Tensor<double> x({1, 1, 3, 3});
  std::iota(x.values().begin(), x.values().end(), 1.0);
  std::vector<std::vector<double>> img(3, std::vector<double>(3));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) img[r][c] = x(0, 0, r, c);

  SUBCASE("integer shift (+1, 0) on the centre tap is the shifted image") {
    dc.weight.value(0, 0, 1, 1) = 1.0;
    dc.offset_conv.bias.value[8] = 1.0;  // row shift of tap 4
    const auto y = dc.forward(x);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const double shifted = i + 1 < 3 ? x(0, 0, i + 1, j) : 0.0;
        CHECK(y(0, 0, i, j) == doctest::Approx(shifted).epsilon(1e-12));
        CHECK(y(0, 0, i, j) == doctest::Approx(oracle::bilinear(img, i + 1.0, j)).epsilon(1e-12));
      }
  }
  SUBCASE("fractional offsets on every tap") {
    dc.weight.value = oracle::random_tensor<double>({1, 1, 3, 3}, rng);
    for (std::size_t k = 0; k < 18; ++k) dc.offset_conv.bias.value[k] = std::uniform_real_distribution<double>(-1.4, 1.4)(rng);
    const auto y = dc.forward(x);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double expect = 0;
        for (std::size_t t = 0; t < 9; ++t) {
          const double r = i + (t / 3) - 1.0 + dc.offset_conv.bias.value[2 * t];
          const double c = j + (t % 3) - 1.0 + dc.offset_conv.bias.value[2 * t + 1];
          expect += dc.weight.value(0, 0, t / 3, t % 3) * oracle::bilinear(img, r, c);
        }
        CHECK(y(0, 0, i, j) == doctest::Approx(expect).epsilon(1e-12));
      }
  }
}

TEST_CASE("enhanced transformer block") {
  std::mt19937_64 rng(12);
  const EtbOptions opts{8, 2, true, true};
  const auto x = oracle::random_tensor<double>({2, 8, 3, 3}, rng);

  SUBCASE("a = b = 0 with a zero feed-forward is the identity, exactly") {
    EnhancedTransformerBlock<double> etb(opts, ParamInit(12), "etb");
    etb.a.value[0] = 0.0;
    etb.b.value[0] = 0.0;
    zero(etb.ffn.expand.weight);
    zero(etb.ffn.expand.bias);
    zero(etb.ffn.project.weight);
    zero(etb.ffn.project.bias);
    CHECK(etb.forward(x) == x);
  }
  SUBCASE("a = 1, b = 0 reproduces the attention-only path bit for bit") {
    EnhancedTransformerBlock<double> both(opts, ParamInit(13), "etb");
    EnhancedTransformerBlock<double> mhsa_only({8, 2, true, false}, ParamInit(13), "etb");
    for (auto* e : {&both, &mhsa_only}) {
      e->a.value[0] = 1.0;
      zero(e->ffn.project.weight);
      zero(e->ffn.project.bias);
    }
    both.b.value[0] = 0.0;
    const auto y = both.forward(x);
    CHECK(y == mhsa_only.forward(x));
    // and equals x + mhsa(norm1(x)) computed by hand from the block's own sub-layers
    TokenNorm<double> norm = both.norm1;
    MultiHeadSelfAttention<double> attn = both.mhsa;
    Tensor<double> expect = attn.forward(norm.forward(x));
    for (std::size_t i = 0; i < x.size(); ++i) expect[i] = x[i] + expect[i];
    CHECK(y == expect);
  }
  SUBCASE("the gradient of a is the inner product of the upstream gradient with the attention branch") {
    EnhancedTransformerBlock<double> etb(opts, ParamInit(14), "etb");
    zero(etb.ffn.project.weight);
    const auto dy = oracle::random_tensor<double>(x.dims(), rng);
    etb.forward(x);
    etb.a.grad.fill(0.0);
    etb.b.grad.fill(0.0);
    etb.backward(dy);
    CHECK(etb.a.grad[0] == doctest::Approx(dot(dy, etb.last_attention())).epsilon(1e-12));
    CHECK(etb.b.grad[0] == doctest::Approx(dot(dy, etb.last_deform())).epsilon(1e-12));
  }
  SUBCASE("both branches off is rejected") {
    CHECK(error_kind_of([] { EnhancedTransformerBlock<float>({8, 2, false, false}, ParamInit(1), "e"); }) ==
          ErrorKind::InvalidConfig);
  }
}

TEST_CASE("gram adjacency") {
  SUBCASE("zero features give a uniform graph") {
    const auto a = gram_adjacency(Tensor<double>({3, 2, 2}));
    for (double v : a.values()) CHECK(v == 0.25);
  }
  SUBCASE("a single node") {
    const auto a = gram_adjacency(Tensor<double>({4, 1, 1}, 0.3));
    CHECK(a.dims() == Shape{1, 1});
    CHECK(a[0] == 1.0);
  }
  SUBCASE("orthogonal one-hot nodes: closed-form softmax") {
    Tensor<double> f({3, 1, 3});
    for (std::size_t k = 0; k < 3; ++k) f(k, 0, k) = 1.0;
    const auto a = gram_adjacency(f);
    const double e = std::exp(1 / std::sqrt(3.0));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(a(i, j) == doctest::Approx(i == j ? e / (e + 2) : 1 / (e + 2)).epsilon(1e-12));
        if (i != j) CHECK(a(i, i) > a(i, j));
      }
  }
  SUBCASE("rows sum to one before symmetrization; the result is exactly symmetric") {
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 50; ++trial) {
      const auto f = oracle::random_tensor<double>({4, 3, 3}, rng, -2, 2);
      const auto s = gram_softmax(f);
      for (std::size_t i = 0; i < 9; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < 9; ++j) row += s(i, j);
        CHECK(std::abs(row - 1) <= 1e-6);
      }
      const auto a = gram_adjacency(f);
      for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j) {
          CHECK(a(i, j) == a(j, i));
          CHECK(a(i, j) > 0.0);
          CHECK(a(i, j) <= 1.0);
        }
    }
  }
}

TEST_CASE("normalize adjacency") {
  SUBCASE("empty graph") {
    const auto p = normalize_adjacency(Tensor<double>({3, 3}));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(p(i, j) == (i == j ? 1.0 : 0.0));
  }
  SUBCASE("two-node closed form") {
    const auto p = normalize_adjacency(Tensor<double>({2, 2}, std::vector<double>{0, 1, 1, 0}));
    for (double v : p.values()) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("spectral radius at most one (power iteration, random 8-node graphs)") {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 100; ++trial) {
      auto a = oracle::random_tensor<double>({8, 8}, rng, 0, trial % 2 ? 1.0 : 5.0);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i);
      const auto p = normalize_adjacency(a);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(p(i, j) == doctest::Approx(p(j, i)).epsilon(1e-14));
      CHECK(oracle::spectral_radius(p) <= 1 + 1e-6);
    }
  }
  SUBCASE("negative entries are rejected") {
    CHECK(error_kind_of([] { normalize_adjacency(Tensor<double>({2, 2}, std::vector<double>{0, -0.1, -0.1, 0})); }) ==
          ErrorKind::NegativeAdjacency);
  }
}

TEST_CASE("graph convolution layer") {
  std::mt19937_64 rng(17);
  const auto h = oracle::random_tensor<double>({2, 3}, rng);
  Tensor<double> eye2({2, 2}), eye3({3, 3});
  eye2(0, 0) = eye2(1, 1) = 1;
  for (std::size_t i = 0; i < 3; ++i) eye3(i, i) = 1;
  SUBCASE("identity propagation and weights give ReLU(H)") {
    const auto y = gcn_layer_forward(eye2, h, eye3);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(y[i] == std::max(0.0, h[i]));
  }
  SUBCASE("zero weights") {
    const auto y = gcn_layer_forward(eye2, h, Tensor<double>({3, 3}));
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("uniform propagation matches a three-matrix product") {
    const Tensor<double> p({2, 2}, 0.5);
    const auto w = oracle::random_tensor<double>({3, 3}, rng);
    const auto y = gcn_layer_forward(p, h, w);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (std::size_t m = 0; m < 2; ++m)
          for (std::size_t k = 0; k < 3; ++k) s += p(n, m) * h(m, k) * w(k, c);
        CHECK(std::abs(y(n, c) - std::max(0.0, s)) <= 1e-6);
      }
  }
  SUBCASE("inconsistent shapes") {
    CHECK(error_kind_of([&] { gcn_layer_forward(eye2, h, eye2); }) == ErrorKind::ShapeMismatch);
  }
}

TEST_CASE("GCN bridge") {
  std::mt19937_64 rng(18);
  SUBCASE("zero weights leave the skip unchanged") {
    GcnBridge<double> bridge(3, 1024, ParamInit(18), "b");
    zero(bridge.w1);
    zero(bridge.w2);
    const auto f = oracle::random_tensor<double>({2, 3, 4, 4}, rng);
    CHECK(bridge.forward(f) == f);
  }
  SUBCASE("maps above the node budget bypass the bridge") {
    GcnBridge<double> bridge(3, 8, ParamInit(19), "b");
    const auto f = oracle::random_tensor<double>({1, 3, 3, 3}, rng);
    CHECK(bridge.forward(f) == f);
    CHECK_FALSE(bridge.applies_to(3, 3));
    CHECK(bridge.applies_to(2, 4));
  }
  SUBCASE("spatial permutation equivariance: all 24 permutations of a 2x2 map") {
    GcnBridge<double> bridge(3, 1024, ParamInit(20), "b");
    const auto f = oracle::random_tensor<double>({1, 3, 2, 2}, rng);
    const auto y = bridge.forward(f);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    int count = 0;
    double worst = 0;
    do {
      Tensor<double> fp(f.dims());
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t n = 0; n < 4; ++n) fp[c * 4 + n] = f[c * 4 + perm[n]];
      const auto yp = bridge.forward(fp);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t n = 0; n < 4; ++n) worst = std::max(worst, std::abs(yp[c * 4 + n] - y[c * 4 + perm[n]]));
      ++count;
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(count == 24);
    CHECK(worst == 0.0);
  }
  SUBCASE("sampled permutations of a 3x3 map") {
    GcnBridge<double> bridge(4, 1024, ParamInit(21), "b");
    const auto f = oracle::random_tensor<double>({1, 4, 3, 3}, rng);
    const auto y = bridge.forward(f);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 50; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor<double> fp(f.dims());
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t n = 0; n < 9; ++n) fp[c * 9 + n] = f[c * 9 + perm[n]];
      const auto yp = bridge.forward(fp);
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t n = 0; n < 9; ++n) CHECK(yp[c * 9 + n] == y[c * 9 + perm[n]]);
    }
  }
  SUBCASE("gradients are permutation-equivariant too, bit for bit") {
    GcnBridge<double> bridge(4, 1024, ParamInit(22), "b");
    const auto f = oracle::random_tensor<double>({1, 4, 3, 3}, rng);
    const auto dy = oracle::random_tensor<double>({1, 4, 3, 3}, rng);
    bridge.forward(f);
    bridge.w1.grad.fill(0.0);
    bridge.w2.grad.fill(0.0);
    const auto dx = bridge.backward(dy);
    const auto g1 = bridge.w1.grad, g2 = bridge.w2.grad;
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 20; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor<double> fp(f.dims()), dyp(f.dims());
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t n = 0; n < 9; ++n) {
          fp[c * 9 + n] = f[c * 9 + perm[n]];
          dyp[c * 9 + n] = dy[c * 9 + perm[n]];
        }
      bridge.forward(fp);
      bridge.w1.grad.fill(0.0);
      bridge.w2.grad.fill(0.0);
      const auto dxp = bridge.backward(dyp);
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t n = 0; n < 9; ++n) CHECK(dxp[c * 9 + n] == dx[c * 9 + perm[n]]);
      CHECK(bridge.w1.grad == g1);
      CHECK(bridge.w2.grad == g2);
    }
  }
}

TEST_CASE("decoder stage") {
  SUBCASE("shape contract") {
    DecoderStage<float> stage(128, ParamInit(22), "d");
    const auto y = stage.forward(Tensor<float>({1, 128, 8, 8}, 0.1f), Tensor<float>({1, 64, 16, 16}, 0.2f), Mode::Train);
    CHECK(y.dims() == Shape{1, 64, 16, 16});
  }
  SUBCASE("mismatched skip") {
    DecoderStage<float> stage(128, ParamInit(22), "d");
    CHECK(error_kind_of([&] {
            stage.forward(Tensor<float>({1, 128, 8, 8}), Tensor<float>({1, 64, 15, 15}), Mode::Train);
          }) == ErrorKind::SkipShapeMismatch);
  }
  SUBCASE("transposed convolution equals insert-zeros-then-convolve") {
    std::mt19937_64 rng(23);
    ConvTranspose2x2<double> up(3, 2, ParamInit(23), "u");
    up.bias.value = oracle::random_tensor<double>({2}, rng);
    const auto x = oracle::random_tensor<double>({1, 3, 2, 2}, rng);
    const auto expected = oracle::conv_transpose_zero_insert(x, up.weight.value, up.bias.value);
    const auto y = up.forward(x);
    REQUIRE(y.dims() == Shape{1, 2, 4, 4});
    CHECK(max_abs_diff(y, expected) <= 1e-6);
  }
}

TEST_CASE("segmentation networks") {
  std::mt19937_64 rng(24);
  ModelConfig cfg;
  cfg.base_channels = 16;
  cfg.init_seed = 3;

  SUBCASE("UGformer round-trips the input shape") {
    SegmentationNet<float> net(cfg);
    const auto y = net.forward(oracle::random_tensor<float>({2, 1, 64, 64}, rng, 0, 1), Mode::Train);
    CHECK(y.dims() == Shape{2, 1, 64, 64});
  }
  SUBCASE("input not divisible by 2^(L+1)") {
    SegmentationNet<float> net(cfg);
    CHECK(error_kind_of([&] { net.forward(Tensor<float>({1, 1, 100, 100}), Mode::Train); }) ==
          ErrorKind::BadSpatialDivisibility);
  }
  SUBCASE("instrumented forward: every intermediate is finite") {
    for (auto arch : {Architecture::UGformer, Architecture::UNet}) {
      ModelConfig c = cfg;
      c.architecture = arch;
      SegmentationNet<float> net(c);
      std::size_t probes = 0;
      bool finite = true;
      for (Mode mode : {Mode::Train, Mode::Eval}) {
        const auto y = net.forward(oracle::random_tensor<float>({2, 1, 64, 64}, rng, 0, 1), mode,
                                   [&](const std::string&, const Tensor<float>& t) {
                                     ++probes;
                                     finite = finite && t.all_finite();
                                   });
        CHECK(y.all_finite());
      }
      CHECK(probes >= 2 * (2 * c.num_stages + 1));
      CHECK(finite);
    }
  }
  SUBCASE("U-Net without the bridge keeps the shape") {
    ModelConfig c = cfg;
    c.architecture = Architecture::UNet;
    c.use_gcn = false;
    SegmentationNet<float> net(c);
    CHECK(net.forward(Tensor<float>({1, 1, 64, 64}, 0.3f), Mode::Eval).dims() == Shape{1, 1, 64, 64});
  }
  SUBCASE("U-Net and UGformer share decoder, head and bridge parameters; only the encoder differs") {
    ModelConfig u = cfg;
    u.architecture = Architecture::UNet;
    SegmentationNet<float> a(cfg), b(u);
    std::map<std::string, const Tensor<float>*> pa, pb;
    for (const auto& [name, p] : a.parameters()) pa[name] = &p->value;
    for (const auto& [name, p] : b.parameters()) pb[name] = &p->value;
    for (const auto& [name, t] : pa) {
      const bool encoder = name.rfind("encoder.", 0) == 0;
      if (encoder) {
        CHECK_MESSAGE(pb.count(name) == 0, name);
      } else {
        REQUIRE_MESSAGE(pb.count(name) == 1, name);
        CHECK_MESSAGE(*pb[name] == *t, name);
      }
    }
    for (const auto& [name, t] : pb)
      if (name.rfind("encoder.", 0) != 0) CHECK_MESSAGE(pa.count(name) == 1, name);
  }
  SUBCASE("parameter count matches the architecture formula and is stable") {
    for (auto arch : {Architecture::UGformer, Architecture::UNet})
      for (bool gcn : {true, false})
        for (auto [mhsa, dconv] : {std::pair{true, true}, std::pair{true, false}, std::pair{false, true}}) {
          ModelConfig c = cfg;
          c.architecture = arch;
          c.use_gcn = gcn;
          c.use_mhsa = mhsa;
          c.use_dconv = dconv;
          SegmentationNet<float> n1(c), n2(c);
          CHECK(n1.parameter_count() == oracle::parameter_count(c));
          CHECK(n1.parameter_count() == n2.parameter_count());
        }
  }
  SUBCASE("configuration guards") {
    ModelConfig c = cfg;
    c.use_mhsa = c.use_dconv = false;
    CHECK(error_kind_of([&] { c.validate(); }) == ErrorKind::InvalidConfig);
  }
}
