#pragma once

// Small layer helpers shared by the denoiser and the encoder. Parameters live
// in a ParamSet under dotted names ("down0.conv1.w"); layers look them up in
// the bound set by prefix.

#include <cmath>
#include <string>

#include "dmoco/autodiff.hpp"

namespace dmoco::nn {

inline constexpr std::size_t kGroups = 4;

template <typename T>
const Var<T>& get(const BoundParams<T>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

/// He-normal tensor, stddev sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
  return rng.normal_tensor<T>(shape, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
void add_conv(ParamSet<T>& p, Rng& rng, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              bool bias = true) {
  p[prefix + ".w"] = he_normal<T>(rng, {cout, cin, k, k}, cin * k * k);
  if (bias) p[prefix + ".b"] = Tensor<T>(Shape{cout});
}

/// Weight stored (in, out) so that y = x W + b.
template <typename T>
void add_linear(ParamSet<T>& p, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out) {
  p[prefix + ".w"] = he_normal<T>(rng, {in, out}, in);
  p[prefix + ".b"] = Tensor<T>(Shape{out});
}

template <typename T>
void add_norm(ParamSet<T>& p, const std::string& prefix, std::size_t channels) {
  p[prefix + ".g"] = Tensor<T>(Shape{channels}, T{1});
  p[prefix + ".b"] = Tensor<T>(Shape{channels});
}

template <typename T>
Var<T> conv(const BoundParams<T>& p, const std::string& prefix, const Var<T>& x, std::size_t stride = 1) {
  const auto& w = get(p, prefix + ".w");
  const std::size_t pad = w.dim(2) / 2;
  auto it = p.find(prefix + ".b");
  return it == p.end() ? ops::conv2d(x, w, stride, pad) : ops::conv2d(x, w, it->second, stride, pad);
}

template <typename T>
Var<T> linear(const BoundParams<T>& p, const std::string& prefix, const Var<T>& x) {
  const auto& b = get(p, prefix + ".b");
  return ops::add(ops::matmul(x, get(p, prefix + ".w")), ops::reshape(b, Shape{1, b.dim(0)}));
}

/// Group norm (kGroups groups) with per-channel scale and shift.
template <typename T>
Var<T> norm(const BoundParams<T>& p, const std::string& prefix, const Var<T>& x) {
  const std::size_t c = x.dim(1);
  auto y = ops::group_norm(x, kGroups);
  y = ops::mul(y, ops::reshape(get(p, prefix + ".g"), Shape{1, c, 1, 1}));
  return ops::add(y, ops::reshape(get(p, prefix + ".b"), Shape{1, c, 1, 1}));
}

template <typename T>
std::size_t count_params(const ParamSet<T>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p) n += t.size();
  return n;
}

}  // namespace dmoco::nn
