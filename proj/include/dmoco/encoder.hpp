#pragma once

// Small convolutional encoder used for contrastive pretraining, the linear
// probe and feature statistics: three (conv, group norm, SiLU, 2x pool)
// blocks, global average pooling, then a two-layer projection head whose
// output is L2-normalised.

#include <cstddef>
#include <string>

#include "dmoco/autodiff.hpp"
#include "dmoco/nn.hpp"

namespace dmoco {

struct EncoderConfig {
  std::size_t width_base = 16;
  std::size_t embed_dim = 64;

  std::size_t feature_dim() const { return 4 * width_base; }

  void validate() const {
    if (width_base < 4 || width_base % nn::kGroups)
      throw ParameterError("encoder width_base must be a multiple of 4 and at least 4");
    if (embed_dim == 0) throw ParameterError("embedding width must be positive");
  }
};

template <typename T>
ParamSet<T> init_encoder(std::uint64_t seed, const EncoderConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t w = cfg.width_base;
  ParamSet<T> p;
  const std::size_t widths[] = {1, w, 2 * w, 4 * w};
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string name = "block" + std::to_string(b);
    nn::add_conv(p, rng, name + ".conv", widths[b], widths[b + 1], 3);
    nn::add_norm(p, name + ".norm", widths[b + 1]);
  }
  nn::add_linear(p, rng, "proj.fc1", cfg.feature_dim(), cfg.feature_dim());
  nn::add_linear(p, rng, "proj.fc2", cfg.feature_dim(), cfg.embed_dim);
  return p;
}

/// Pooled backbone features (n, 4 * width_base) for images (n, 1, H, H).
template <typename T>
Var<T> encoder_features(const BoundParams<T>& p, const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != s[3] || s[2] < 8 || s[2] % 8)
    throw ParameterError("encoder input must be (n,1,H,H) with H a multiple of 8, got " + to_string(s));
  auto h = x;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string name = "block" + std::to_string(b);
    h = ops::avgpool2x2(ops::silu(nn::norm(p, name + ".norm", nn::conv(p, name + ".conv", h))));
  }
  return ops::global_avgpool(h);
}

/// Unit-norm embeddings (n, embed_dim).
template <typename T>
Var<T> encoder_embed(const BoundParams<T>& p, const Var<T>& x) {
  auto h = ops::relu(nn::linear(p, "proj.fc1", encoder_features(p, x)));
  return ops::l2_normalize(nn::linear(p, "proj.fc2", h));
}

/// Feature extraction without gradients, in chunks.
template <typename T>
Tensor<T> extract_features(const ParamSet<T>& params, const Tensor<T>& images, std::size_t chunk = 64) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  std::vector<T> data;
  std::size_t width = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Shape s = images.shape();
    s[0] = m;
    std::vector<T> part(images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                        images.data().begin() + static_cast<std::ptrdiff_t>((start + m) * per));
    Graph<T> g;
    auto f = encoder_features(g.bind(params, false), g.constant(Tensor<T>(s, std::move(part))));
    width = f.dim(1);
    data.insert(data.end(), f.value().data().begin(), f.value().data().end());
  }
  return Tensor<T>(Shape{n, width}, std::move(data));
}

}  // namespace dmoco
