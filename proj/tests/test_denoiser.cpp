#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "dmoco/denoiser.hpp"
#include "dmoco/grad_check.hpp"

using namespace dmoco;

namespace {

std::size_t conv_count(std::size_t cin, std::size_t cout, std::size_t k, bool bias = true) {
  return cout * cin * k * k + (bias ? cout : 0);
}
std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }
std::size_t block_count(std::size_t cin, std::size_t cout, std::size_t te, bool normed = true) {
  const std::size_t norms = normed ? 4 * cout : 0;
  return conv_count(cin, cout, 3) + linear_count(te, cout) + conv_count(cout, cout, 3) + norms;
}

}  // namespace

TEST(TimeEmbed, UnitPairs) {
  for (std::size_t t : {1u, 17u, 500u, 1000u}) {
    const auto e = time_embed(t, 32, 1000);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(e[2 * i] * e[2 * i] + e[2 * i + 1] * e[2 * i + 1], 1.0, 1e-9);
  }
}

TEST(TimeEmbed, RejectsOutOfRange) {
  EXPECT_THROW(time_embed(0, 32, 1000), ParameterError);
  EXPECT_THROW(time_embed(1001, 32, 1000), ParameterError);
  EXPECT_THROW(time_embed(3, 31, 1000), ParameterError);
}

TEST(TimeEmbed, DistinctSteps) {
  std::vector<std::vector<double>> all;
  for (std::size_t t = 1; t <= 1000; ++t) all.push_back(time_embed(t, 32, 1000));
  for (std::size_t a = 0; a < all.size(); ++a)
    for (std::size_t b = a + 1; b < all.size(); ++b) {
      double diff = 0;
      for (std::size_t i = 0; i < 32; ++i) diff = std::max(diff, std::abs(all[a][i] - all[b][i]));
      ASSERT_GT(diff, 1e-6) << a + 1 << " vs " << b + 1;
    }
}

TEST(Denoiser, ParameterCount) {
  const DenoiserConfig cfg;  // width 16
  const std::size_t w = 16, c = 32, te = 64;
  const std::size_t expected = linear_count(cfg.time_dim, te) + linear_count(te, te) + conv_count(1, w, 3) +
                               block_count(w, w, te) + block_count(w, c, te) + block_count(c, c, te) +
                               3 * conv_count(c, c, 1, false) + conv_count(c, c, 1) + block_count(2 * c, c, te, false) +
                               block_count(c + w, w, te, false) + conv_count(w, 1, 3);
  EXPECT_EQ(expected, 93329u);
  EXPECT_EQ(nn::count_params(init_denoiser<double>(1, cfg)), expected);
}

TEST(Denoiser, InitIsSeeded) {
  const DenoiserConfig cfg{8, 16, 2, 100};
  const auto a = init_denoiser<double>(4, cfg), b = init_denoiser<double>(4, cfg), c = init_denoiser<double>(5, cfg);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.at("down0.norm1.g"), Tensor<double>(Shape{8}, 1.0));
  EXPECT_EQ(a.at("down0.conv1.b"), Tensor<double>(Shape{8}, 0.0));
}

TEST(Denoiser, ShapesAndZeroParams) {
  const DenoiserConfig cfg{8, 16, 2, 100};
  auto params = init_denoiser<double>(2, cfg);
  Rng rng(1);
  for (std::size_t H : {8u, 16u, 32u}) {
    const auto x = rng.normal_tensor<double>({2, 1, H, H});
    const auto y = make_eps_predictor(params, cfg)(x, 5);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y, make_eps_predictor(params, cfg)(x, 5));
  }
  for (auto& [name, t] : params) t = Tensor<double>(t.shape());
  const auto x = rng.normal_tensor<double>({2, 1, 8, 8});
  EXPECT_EQ(make_eps_predictor(params, cfg)(x, 5), Tensor<double>(x.shape()));
}

TEST(Denoiser, RejectsUnsupportedResolution) {
  const DenoiserConfig cfg{8, 16, 2, 100};
  const auto params = init_denoiser<double>(2, cfg);
  EXPECT_THROW(make_eps_predictor(params, cfg)(Tensor<double>(Shape{1, 1, 12, 12}), 1), ParameterError);
  EXPECT_THROW(make_eps_predictor(params, cfg)(Tensor<double>(Shape{1, 1, 8, 16}), 1), ParameterError);
}

TEST(LinearAttention, SingleTokenReturnsValue) {
  Rng rng(8);
  Graph<double> g;
  auto q = g.constant(rng.normal_tensor<double>({3, 4, 1}));
  auto k = g.constant(rng.normal_tensor<double>({3, 4, 1}));
  auto v = g.constant(rng.normal_tensor<double>({3, 4, 1}));
  const auto out = linear_attention(q, k, v).value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], v.value()[i], 1e-12);
}

TEST(LinearAttention, SublayerOnSingleTokenIsProjectedValue) {
  const DenoiserConfig cfg{8, 16, 2, 100};
  const auto params = init_denoiser<double>(3, cfg);
  Rng rng(9);
  Graph<double> g;
  const auto p = g.bind(params, false);
  auto x = g.constant(rng.normal_tensor<double>({2, 16, 1, 1}));
  const auto got = attention_sublayer(p, x, cfg.heads).value();
  const auto want = nn::conv(p, "attn.o", nn::conv(p, "attn.v", x)).value();
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(LinearAttention, EquivariantUnderTokenPermutation) {
  Rng rng(10);
  const std::size_t d = 4, N = 9;
  const auto q = rng.normal_tensor<double>({1, d, N}), k = rng.normal_tensor<double>({1, d, N}),
             v = rng.normal_tensor<double>({1, d, N});
  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  auto permute = [&](const Tensor<double>& t) {
    Tensor<double> out(t.shape());
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t n = 0; n < N; ++n) out[c * N + n] = t[c * N + perm[n]];
    return out;
  };
  Graph<double> g;
  const auto base = linear_attention(g.constant(q), g.constant(k), g.constant(v)).value();
  const auto moved = linear_attention(g.constant(permute(q)), g.constant(permute(k)), g.constant(permute(v))).value();
  const auto expect = permute(base);
  for (std::size_t i = 0; i < moved.size(); ++i) EXPECT_NEAR(moved[i], expect[i], 1e-12);
}

TEST(Denoiser, DdpmLossGradientThroughNetwork) {
  const DenoiserConfig cfg{4, 8, 2, 20};
  auto params = init_denoiser<double>(21, cfg);
  const auto sched = make_linear_schedule(20, 1e-3, 0.2);
  Rng rng(22);
  const auto x0 = rng.normal_tensor<double>({2, 1, 8, 8}, 0.5);
  const auto eps = rng.normal_tensor<double>({2, 1, 8, 8});
  const std::vector<std::size_t> t{4, 15};
  ParamLossFn loss = [&](Graph<double>& g, const BoundParams<double>& p) {
    EpsModel<double> model = [&](Graph<double>& gg, const Var<double>& x, std::span<const std::size_t> ts) {
      return denoise_forward(gg, p, x, ts, cfg);
    };
    return ddpm_loss<double>(g, model, x0, t, eps, sched);
  };
  for (const char* name : {"out.w", "up0.conv2.w", "attn.q.w", "attn.k.w", "mid.temb.w", "time.fc1.w", "in.w",
                           "down1.norm1.g"})
    EXPECT_LE(grad_check_params(loss, params, name), 1e-4) << name;
}
