#include <catch2/catch_amalgamated.hpp>

#include "ltsp/ops.hpp"
#include "ltsp/rng.hpp"
#include "oracles.hpp"

using ltsp::Shape;
using ltsp::Tensor;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, ltsp::Rng& rng, bool requires_grad = false, double lo = -1.0,
                        double hi = 1.0) {
  std::vector<T> vals(static_cast<size_t>(ltsp::shape_numel(shape)));
  for (auto& v : vals) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_data(std::move(shape), std::move(vals), requires_grad);
}

template <typename T>
void check_close(const std::vector<T>& got, const std::vector<T>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    REQUIRE_THAT(static_cast<double>(got[i]),
                 Catch::Matchers::WithinAbs(static_cast<double>(want[i]), tol) ||
                     Catch::Matchers::WithinRel(static_cast<double>(want[i]), tol));
  }
}

}  // namespace

TEST_CASE("conv2d: zero weight annihilates, identity kernel passes through") {
  ltsp::Rng rng(1);
  auto x = random_tensor<float>({2, 5, 5}, rng);
  auto w0 = Tensor<float>::zeros({3, 2, 3, 3});
  auto b0 = Tensor<float>::zeros({3});
  auto y = ltsp::conv2d(x, w0, b0, 1);
  for (float v : y.values()) CHECK(v == 0.0f);

  auto xi = random_tensor<float>({1, 4, 4}, rng);
  auto wi = Tensor<float>::from_data({1, 1, 1, 1}, {1.0f});
  auto bi = Tensor<float>::zeros({1});
  auto yi = ltsp::conv2d(xi, wi, bi, 0);
  CHECK(yi.values() == xi.values());
}

TEST_CASE("conv2d matches nested-loop oracle") {
  ltsp::Rng rng(2);
  auto x = random_tensor<float>({2, 5, 5}, rng);
  auto w = random_tensor<float>({8, 2, 3, 3}, rng);
  auto b = random_tensor<float>({8}, rng);
  auto y = ltsp::conv2d(x, w, b, 1);
  auto want = oracle::conv2d(x.values(), 2, 5, 5, w.values(), 8, 3, b.values(), 1);
  check_close(y.values(), want, 1e-6);
}

TEST_CASE("conv2d rejects channel mismatch with diagnostic") {
  ltsp::Rng rng(3);
  auto x = random_tensor<float>({2, 5, 5}, rng);
  auto w = random_tensor<float>({8, 3, 3, 3}, rng);
  auto b = Tensor<float>::zeros({8});
  try {
    ltsp::conv2d(x, w, b, 1);
    FAIL("expected shape error");
  } catch (const ltsp::Error& e) {
    CHECK(e.category() == ltsp::ErrorCategory::shape);
    CHECK(std::string(e.what()).find("[2x5x5]") != std::string::npos);
  }
}

TEST_CASE("conv3d: scalar case and zero annihilator") {
  auto x = Tensor<float>::from_data({1, 1, 1, 1, 1}, {3.0f});
  auto w = Tensor<float>::from_data({1, 1, 1, 1, 1}, {-2.0f});
  auto b = Tensor<float>::from_data({1}, {0.5f});
  auto y = ltsp::conv3d(x, w, b, 0);
  CHECK(y.item() == Catch::Approx(3.0f * -2.0f + 0.5f));

  ltsp::Rng rng(4);
  auto x2 = random_tensor<float>({1, 2, 4, 4, 4}, rng);
  auto y2 = ltsp::conv3d(x2, Tensor<float>::zeros({3, 2, 3, 3, 3}), Tensor<float>::zeros({3}), 1);
  for (float v : y2.values()) CHECK(v == 0.0f);
}

TEST_CASE("conv3d matches nested-loop oracle") {
  ltsp::Rng rng(5);
  auto x = random_tensor<float>({1, 2, 4, 4, 4}, rng);
  auto w = random_tensor<float>({3, 2, 3, 3, 3}, rng);
  auto b = random_tensor<float>({3}, rng);
  auto y = ltsp::conv3d(x, w, b, 1);
  auto want = oracle::conv3d(x.values(), 2, 4, 4, 4, w.values(), 3, 3, b.values(), 1);
  check_close(y.values(), want, 1e-6);
}

TEST_CASE("maxpool3d: constants, enumerated window, oracle") {
  auto c = Tensor<float>::filled({1, 1, 4, 4, 4}, 2.5f);
  auto yc = ltsp::maxpool3d(c);
  for (float v : yc.values()) CHECK(v == 2.5f);

  std::vector<float> seq(8);
  for (int i = 0; i < 8; ++i) seq[static_cast<size_t>(i)] = static_cast<float>(i + 1);
  auto e = Tensor<float>::from_data({1, 1, 2, 2, 2}, std::move(seq));
  CHECK(ltsp::maxpool3d(e).item() == 8.0f);

  ltsp::Rng rng(6);
  auto x = random_tensor<float>({1, 3, 4, 4, 4}, rng);
  auto y = ltsp::maxpool3d(x);
  auto want = oracle::maxpool3d(x.values(), 3, 4, 4, 4);
  CHECK(y.values() == want);

  CHECK_THROWS_AS(ltsp::maxpool3d(random_tensor<float>({1, 1, 3, 4, 4}, rng)), ltsp::Error);
}

TEST_CASE("batchnorm: fixed point, shift property, oracle") {
  // per-channel zero-mean unit-variance input stays put (up to eps effect)
  std::vector<float> vals = {-1, 1, -1, 1, -1, 1, -1, 1};
  auto x = Tensor<float>::from_data({2, 1, 2, 2}, std::move(vals));
  auto st = ltsp::BatchNormState<float>::create(1);
  auto y = ltsp::batchnorm(x, st);
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == Catch::Approx(x.values()[i]).margin(1e-4));

  // shift beta moves the per-channel mean to beta
  ltsp::Rng rng(7);
  auto x2 = random_tensor<float>({2, 3, 4, 4}, rng);
  auto st2 = ltsp::BatchNormState<float>::create(3);
  st2.shift.values() = {0.5f, -1.0f, 2.0f};
  auto y2 = ltsp::batchnorm(x2, st2);
  for (int c = 0; c < 3; ++c) {
    double mean = 0;
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < 16; ++i) mean += y2.values()[static_cast<size_t>((b * 3 + c) * 16 + i)];
    mean /= 32;
    CHECK(mean == Catch::Approx(st2.shift.values()[static_cast<size_t>(c)]).margin(1e-5));
  }

  // direct statistics oracle
  auto x3 = random_tensor<float>({2, 3, 4, 4, 4}, rng);
  auto st3 = ltsp::BatchNormState<float>::create(3);
  st3.scale.values() = {1.5f, 0.5f, 2.0f};
  st3.shift.values() = {0.1f, -0.2f, 0.3f};
  auto y3 = ltsp::batchnorm(x3, st3);
  auto want = oracle::batchnorm_train(x3.values(), 2, 3, 64, st3.scale.values(),
                                      st3.shift.values(), st3.eps);
  check_close(y3.values(), want, 1e-6);
}

TEST_CASE("batchnorm rejects single-element statistics in training mode") {
  auto x = Tensor<float>::from_data({1, 2, 1, 1}, {1.0f, 2.0f});
  auto st = ltsp::BatchNormState<float>::create(2);
  CHECK_THROWS_AS(ltsp::batchnorm(x, st), ltsp::Error);
  st.training_mode = false;
  CHECK_NOTHROW(ltsp::batchnorm(x, st));
}

TEST_CASE("batchnorm eval mode uses running statistics") {
  ltsp::Rng rng(8);
  auto x = random_tensor<float>({1, 2, 2, 2}, rng);
  auto st = ltsp::BatchNormState<float>::create(2);
  st.running_mean = {1.0f, -1.0f};
  st.running_var = {4.0f, 0.25f};
  st.training_mode = false;
  auto y = ltsp::batchnorm(x, st);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) {
      const size_t at = static_cast<size_t>(c * 4 + i);
      const float want = (x.values()[at] - st.running_mean[static_cast<size_t>(c)]) /
                         std::sqrt(st.running_var[static_cast<size_t>(c)] + st.eps);
      CHECK(y.values()[at] == Catch::Approx(want).margin(1e-6));
    }
}

TEST_CASE("activation origin values and negative clamp") {
  auto x = Tensor<float>::from_data({3}, {0.0f, -2.0f, 3.0f});
  auto s = ltsp::sigmoid(x);
  auto t = ltsp::tanh_act(x);
  auto r = ltsp::relu(x);
  CHECK(s.values()[0] == Catch::Approx(0.5f));
  CHECK(t.values()[0] == 0.0f);
  CHECK(r.values()[0] == 0.0f);
  CHECK(r.values()[1] == 0.0f);
  CHECK(r.values()[2] == 3.0f);
  CHECK(s.values()[2] > 0.0f);
  CHECK(s.values()[2] < 1.0f);
  CHECK(t.values()[1] > -1.0f);
  CHECK(t.values()[1] < 0.0f);
}

TEST_CASE("concat/chunk channel arithmetic and round trip") {
  ltsp::Rng rng(9);
  auto a = random_tensor<float>({2, 3, 3}, rng);
  auto b = random_tensor<float>({2, 3, 3}, rng);
  auto cat = ltsp::concat_channels(a, b);
  CHECK(cat.shape() == ltsp::Shape{4, 3, 3});

  auto pieces = ltsp::chunk_channels(cat, 2);
  REQUIRE(pieces.size() == 2);
  CHECK(pieces[0].values() == a.values());
  CHECK(pieces[1].values() == b.values());

  auto c8 = random_tensor<float>({8, 2, 2}, rng);
  auto four = ltsp::chunk_channels(c8, 4);
  REQUIRE(four.size() == 4);
  for (const auto& p : four) CHECK(p.shape() == ltsp::Shape{2, 2, 2});

  CHECK_THROWS_AS(ltsp::chunk_channels(c8, 3), ltsp::Error);

  // rank-4: channel axis is 1
  auto a4 = random_tensor<float>({2, 2, 3, 3}, rng);
  auto b4 = random_tensor<float>({2, 2, 3, 3}, rng);
  auto cat4 = ltsp::concat_channels(a4, b4);
  CHECK(cat4.shape() == ltsp::Shape{2, 4, 3, 3});
  auto back = ltsp::chunk_channels(cat4, 2);
  CHECK(back[0].values() == a4.values());
  CHECK(back[1].values() == b4.values());
}

TEST_CASE("upsample_trilinear: constants, single source, oracle") {
  auto c = Tensor<float>::filled({1, 2, 2, 2, 2}, 1.25f);
  auto yc = ltsp::upsample_trilinear(c);
  CHECK(yc.shape() == ltsp::Shape{1, 2, 4, 4, 4});
  for (float v : yc.values()) CHECK(v == Catch::Approx(1.25f));

  auto one = Tensor<float>::from_data({1, 1, 1, 1, 1}, {0.75f});
  auto y1 = ltsp::upsample_trilinear(one);
  CHECK(y1.shape() == ltsp::Shape{1, 1, 2, 2, 2});
  for (float v : y1.values()) CHECK(v == 0.75f);

  ltsp::Rng rng(10);
  auto x = random_tensor<float>({1, 2, 2, 2, 2}, rng);
  auto y = ltsp::upsample_trilinear(x);
  auto want = oracle::upsample2x(x.values(), 2, 2, 2, 2);
  check_close(y.values(), want, 1e-6);
}

TEST_CASE("softmax_channels normalizes per position") {
  ltsp::Rng rng(11);
  std::vector<float> vals(2 * 3 * 3 * 3 * 2);
  for (auto& v : vals) v = static_cast<float>(rng.uniform(-4.0, 4.0));
  auto x = Tensor<float>::from_data({1, 2, 3, 3, 6}, std::move(vals));
  auto y = ltsp::softmax_channels(x);
  const int64_t inner = 3 * 3 * 6;
  for (int64_t i = 0; i < inner; ++i) {
    const float p0 = y.values()[static_cast<size_t>(i)];
    const float p1 = y.values()[static_cast<size_t>(inner + i)];
    CHECK(p0 + p1 == Catch::Approx(1.0f).margin(1e-6));
    CHECK(p0 >= 0.0f);
    CHECK(p1 >= 0.0f);
  }
}

TEST_CASE("split/stack slices are exact inverses") {
  ltsp::Rng rng(12);
  auto x = random_tensor<float>({1, 3, 4, 2, 2}, rng);
  auto slices = ltsp::split_slices(x);
  REQUIRE(slices.size() == 4);
  for (const auto& s : slices) CHECK(s.shape() == ltsp::Shape{3, 2, 2});
  auto back = ltsp::stack_slices(slices);
  CHECK(back.values() == x.values());
  CHECK(back.shape() == x.shape());

  // slice i equals the i-th section along S
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t hw = 0; hw < 4; ++hw)
        CHECK(slices[static_cast<size_t>(i)].values()[static_cast<size_t>(c * 4 + hw)] ==
              x.values()[static_cast<size_t>((c * 4 + i) * 4 + hw)]);

  auto bad = slices;
  bad[1] = random_tensor<float>({3, 2, 3}, rng);
  CHECK_THROWS_AS(ltsp::stack_slices(bad), ltsp::Error);
}

// The 1e-6 tolerance is checked in the wide precision; the compute path is
// the same template either way, and single-precision rounding alone exceeds
// 1e-6 once a reduction has a few hundred terms.
TEST_CASE("oracle agreement holds across 20 random small shapes per op") {
  ltsp::Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t cin = rng.uniform_int(1, 3);
    const int64_t cout = rng.uniform_int(1, 4);
    const int64_t h = rng.uniform_int(3, 7);
    const int64_t w = rng.uniform_int(3, 7);
    const int64_t s = rng.uniform_int(3, 6);
    const int k = static_cast<int>(rng.uniform_int(1, 3));
    const int pad = static_cast<int>(rng.uniform_int(0, 1));
    if (h + 2 * pad - k + 1 < 1 || w + 2 * pad - k + 1 < 1 || s + 2 * pad - k + 1 < 1) continue;

    auto x2 = random_tensor<double>({cin, h, w}, rng);
    auto w2 = random_tensor<double>({cout, cin, k, k}, rng);
    auto b2 = random_tensor<double>({cout}, rng);
    check_close(ltsp::conv2d(x2, w2, b2, pad).values(),
                oracle::conv2d(x2.values(), cin, h, w, w2.values(), cout, k, b2.values(), pad),
                1e-6);

    auto x3 = random_tensor<double>({1, cin, s, h, w}, rng);
    auto w3 = random_tensor<double>({cout, cin, k, k, k}, rng);
    check_close(ltsp::conv3d(x3, w3, b2, pad).values(),
                oracle::conv3d(x3.values(), cin, s, h, w, w3.values(), cout, k, b2.values(), pad),
                1e-6);

    const int64_t he = 2 * rng.uniform_int(1, 3), we = 2 * rng.uniform_int(1, 3),
                  se = 2 * rng.uniform_int(1, 3);
    auto xp = random_tensor<double>({1, cin, se, he, we}, rng);
    CHECK(ltsp::maxpool3d(xp).values() == oracle::maxpool3d(xp.values(), cin, se, he, we));

    auto xu = random_tensor<double>({1, cin, s, h, w}, rng);
    check_close(ltsp::upsample_trilinear(xu).values(),
                oracle::upsample2x(xu.values(), cin, s, h, w), 1e-6);

    auto xb = random_tensor<double>({2, cin, h, w}, rng);
    auto st = ltsp::BatchNormState<double>::create(cin);
    for (auto& g : st.scale.values()) g = rng.uniform(0.5, 1.5);
    for (auto& sh : st.shift.values()) sh = rng.uniform(-0.5, 0.5);
    check_close(ltsp::batchnorm(xb, st).values(),
                oracle::batchnorm_train(xb.values(), 2, cin, h * w, st.scale.values(),
                                        st.shift.values(), st.eps),
                1e-6);
  }
}

TEST_CASE("forward results are bit-identical across repeated runs") {
  ltsp::Rng rng(14);
  auto x = random_tensor<float>({1, 3, 6, 6, 6}, rng);
  auto w = random_tensor<float>({4, 3, 3, 3, 3}, rng);
  auto b = random_tensor<float>({4}, rng);
  auto y1 = ltsp::conv3d(x, w, b, 1);
  auto y2 = ltsp::conv3d(x, w, b, 1);
  CHECK(y1.values() == y2.values());
}
