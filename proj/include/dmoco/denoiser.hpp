#pragma once

// Scaled-down U-Net noise estimator eps_theta(x_t, t): two resolution levels
// with skip connections, sinusoidal time embeddings injected as per-channel
// biases, and linear attention at the bottleneck.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dmoco/autodiff.hpp"
#include "dmoco/diffusion.hpp"
#include "dmoco/nn.hpp"

namespace dmoco {

struct DenoiserConfig {
  std::size_t width_base = 16;
  std::size_t time_dim = 32;
  std::size_t heads = 2;
  std::size_t max_t = 1000;

  void validate() const {
    if (width_base < 4 || width_base % nn::kGroups)
      throw ParameterError("width_base must be a multiple of 4 and at least 4");
    if (time_dim == 0 || time_dim % 2) throw ParameterError("time embedding width must be even");
    if (heads == 0 || (2 * width_base) % heads) throw ParameterError("heads must divide the bottleneck width");
    if (max_t < 1) throw ParameterError("max_t must be at least 1");
  }
};

/// Sinusoidal embedding: component 2i = sin(t / 10000^(2i/dim)), 2i+1 = cos.
inline std::vector<double> time_embed(std::size_t t, std::size_t dim, std::size_t max_t) {
  if (t < 1 || t > max_t) throw ParameterError("time step " + std::to_string(t) + " outside 1.." + std::to_string(max_t));
  if (dim == 0 || dim % 2) throw ParameterError("time embedding width must be even");
  std::vector<double> e(dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(dim));
    e[2 * i] = std::sin(static_cast<double>(t) * freq);
    e[2 * i + 1] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

/// Efficient-attention core on (B, d, N) projections: keys are softmaxed over
/// tokens, queries over channels, and context = keys * values^T is (B, d, d).
/// Returns (B, d, N).
template <typename T>
Var<T> linear_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  auto ks = ops::softmax(k);
  auto qs = ops::softmax(ops::transpose(q));
  auto context = ops::matmul(ks, ops::transpose(v));
  return ops::transpose(ops::matmul(qs, context));
}

namespace denoiser_detail {

template <typename T>
void add_block(ParamSet<T>& p, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
               std::size_t temb, bool normed = true) {
  nn::add_conv(p, rng, name + ".conv1", cin, cout, 3);
  if (normed) nn::add_norm(p, name + ".norm1", cout);
  nn::add_linear(p, rng, name + ".temb", temb, cout);
  nn::add_conv(p, rng, name + ".conv2", cout, cout, 3);
  if (normed) nn::add_norm(p, name + ".norm2", cout);
}

template <typename T>
Var<T> block(const BoundParams<T>& p, const std::string& name, const Var<T>& x, const Var<T>& temb,
             bool normed = true) {
  auto maybe_norm = [&](const std::string& n, const Var<T>& v) { return normed ? nn::norm(p, n, v) : v; };
  auto h = ops::silu(maybe_norm(name + ".norm1", nn::conv(p, name + ".conv1", x)));
  auto bias = nn::linear(p, name + ".temb", temb);
  h = ops::add(h, ops::reshape(bias, Shape{bias.dim(0), bias.dim(1), 1, 1}));
  return ops::silu(maybe_norm(name + ".norm2", nn::conv(p, name + ".conv2", h)));
}

}  // namespace denoiser_detail

template <typename T>
ParamSet<T> init_denoiser(std::uint64_t seed, const DenoiserConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t w = cfg.width_base, te = 4 * w, c = 2 * w;
  ParamSet<T> p;
  nn::add_linear(p, rng, "time.fc1", cfg.time_dim, te);
  nn::add_linear(p, rng, "time.fc2", te, te);
  nn::add_conv(p, rng, "in", 1, w, 3);
  denoiser_detail::add_block(p, rng, "down0", w, w, te);
  denoiser_detail::add_block(p, rng, "down1", w, c, te);
  denoiser_detail::add_block(p, rng, "mid", c, c, te);
  nn::add_conv(p, rng, "attn.q", c, c, 1, false);
  nn::add_conv(p, rng, "attn.k", c, c, 1, false);
  nn::add_conv(p, rng, "attn.v", c, c, 1, false);
  nn::add_conv(p, rng, "attn.o", c, c, 1);
  denoiser_detail::add_block(p, rng, "up1", c + c, c, te, false);
  denoiser_detail::add_block(p, rng, "up0", c + w, w, te, false);
  nn::add_conv(p, rng, "out", w, 1, 3);
  return p;
}

/// Bottleneck attention sublayer with its projections (no residual).
template <typename T>
Var<T> attention_sublayer(const BoundParams<T>& p, const Var<T>& x, std::size_t heads) {
  const std::size_t n = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
  const Shape split{n * heads, c / heads, hh * ww};
  auto q = ops::reshape(nn::conv(p, "attn.q", x), split);
  auto k = ops::reshape(nn::conv(p, "attn.k", x), split);
  auto v = ops::reshape(nn::conv(p, "attn.v", x), split);
  auto a = ops::reshape(linear_attention(q, k, v), Shape{n, c, hh, ww});
  return nn::conv(p, "attn.o", a);
}

/// eps_hat for a batch x_t of shape (n, 1, H, H), H in {8, 16, 32}.
template <typename T>
Var<T> denoise_forward(Graph<T>& g, const BoundParams<T>& p, const Var<T>& x, std::span<const std::size_t> t,
                       const DenoiserConfig& cfg) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != s[3] || (s[2] != 8 && s[2] != 16 && s[2] != 32))
    throw ParameterError("denoiser input must be (n,1,H,H) with H in {8,16,32}, got " + to_string(s));
  if (t.size() != s[0]) throw ShapeError("denoiser needs one time step per batch element");
  const std::size_t n = s[0];
  Tensor<T> sin_table(Shape{n, cfg.time_dim});
  for (std::size_t b = 0; b < n; ++b) {
    const auto e = time_embed(t[b], cfg.time_dim, cfg.max_t);
    for (std::size_t i = 0; i < cfg.time_dim; ++i) sin_table[b * cfg.time_dim + i] = static_cast<T>(e[i]);
  }
  auto temb = ops::silu(nn::linear(p, "time.fc1", g.constant(std::move(sin_table))));
  temb = ops::silu(nn::linear(p, "time.fc2", temb));

  using denoiser_detail::block;
  auto h = nn::conv(p, "in", x);
  auto skip0 = block(p, "down0", h, temb);
  auto skip1 = block(p, "down1", ops::avgpool2x2(skip0), temb);
  h = block(p, "mid", ops::avgpool2x2(skip1), temb);
  h = ops::add(h, attention_sublayer(p, h, cfg.heads));
  h = block(p, "up1", ops::concat<T>({ops::upsample2x(h), skip1}, 1), temb, false);
  h = block(p, "up0", ops::concat<T>({ops::upsample2x(h), skip0}, 1), temb, false);
  return nn::conv(p, "out", h);
}

/// Graph-level estimator with the given parameters bound as trainable leaves
/// (training) or constants (inference).
template <typename T>
EpsModel<T> make_eps_model(const ParamSet<T>& params, const DenoiserConfig& cfg, bool trainable,
                           BoundParams<T>* bound_out = nullptr) {
  return [&params, cfg, trainable, bound_out](Graph<T>& g, const Var<T>& x, std::span<const std::size_t> t) {
    auto bound = g.bind(params, trainable);
    if (bound_out) *bound_out = bound;
    return denoise_forward(g, bound, x, t, cfg);
  };
}

/// Tensor-level estimator for the sampler.
template <typename T>
EpsPredictor<T> make_eps_predictor(const ParamSet<T>& params, const DenoiserConfig& cfg) {
  return [&params, cfg](const Tensor<T>& x, std::size_t t) {
    Graph<T> g;
    std::vector<std::size_t> ts(x.dim(0), t);
    return denoise_forward(g, g.bind(params, false), g.constant(x), ts, cfg).value();
  };
}

}  // namespace dmoco
