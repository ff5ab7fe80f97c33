#pragma once

// Forward (noising) and backward (denoising) processes of a DDPM, the
// epsilon-prediction loss and the ancestral sampler.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dmoco/autodiff.hpp"
#include "dmoco/schedule.hpp"

namespace dmoco {

/// Noise estimator used inside a graph (training): eps_hat = f(x_t, t).
template <typename T>
using EpsModel = std::function<Var<T>(Graph<T>&, const Var<T>& x_t, std::span<const std::size_t> t)>;

/// Noise estimator on plain tensors (sampling); one step index for the batch.
template <typename T>
using EpsPredictor = std::function<Tensor<T>(const Tensor<T>& x_t, std::size_t t)>;

enum class SamplerMode { standard, literal_eq3 };
enum class SigmaMode { beta, zero };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::standard;
  SigmaMode sigma_mode = SigmaMode::beta;
};

inline SamplerMode parse_sampler_mode(const std::string& s) {
  if (s == "standard") return SamplerMode::standard;
  if (s == "literal_eq3") return SamplerMode::literal_eq3;
  throw ParameterError("unknown sampler mode '" + s + "' (expected standard or literal_eq3)");
}

inline SigmaMode parse_sigma_mode(const std::string& s) {
  if (s == "beta") return SigmaMode::beta;
  if (s == "zero") return SigmaMode::zero;
  throw ParameterError("unknown sigma mode '" + s + "' (expected beta or zero)");
}

/// Applies x_s = sqrt(a_s) x_{s-1} + sqrt(1 - a_s) eps_{s-1} for s = 1..t.
template <typename T>
Tensor<T> forward_iterative(const Tensor<T>& x0, std::size_t t, Rng& rng, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps()) throw ParameterError("forward_iterative: step out of range");
  Tensor<T> x = x0;
  for (std::size_t s = 1; s <= t; ++s) {
    const double ca = std::sqrt(sched.a(s)), cn = std::sqrt(1.0 - sched.a(s));
    for (auto& v : x.data()) v = static_cast<T>(ca * v + cn * rng.normal());
  }
  return x;
}

/// Same recursion with caller-supplied noise, one tensor per step.
template <typename T>
Tensor<T> forward_iterative(const Tensor<T>& x0, std::span<const Tensor<T>> noise, const NoiseSchedule& sched) {
  if (noise.empty() || noise.size() > sched.steps()) throw ParameterError("forward_iterative: step out of range");
  Tensor<T> x = x0;
  for (std::size_t s = 1; s <= noise.size(); ++s) {
    const auto& e = noise[s - 1];
    if (e.shape() != x0.shape()) throw ShapeError("forward_iterative: noise shape mismatch");
    const double ca = std::sqrt(sched.a(s)), cn = std::sqrt(1.0 - sched.a(s));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(ca * x[i] + cn * e[i]);
  }
  return x;
}

/// sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps, with one step per leading-axis
/// element. t = 0 returns x0.
template <typename T>
Tensor<T> forward_closed(const Tensor<T>& x0, std::span<const std::size_t> t, const Tensor<T>& eps,
                         const NoiseSchedule& sched) {
  if (eps.shape() != x0.shape())
    throw ShapeError("forward_closed: eps " + to_string(eps.shape()) + " vs x0 " + to_string(x0.shape()));
  const std::size_t n = x0.dim(0);
  if (t.size() != n) throw ShapeError("forward_closed: need one step per batch element");
  const std::size_t per = x0.size() / n;
  Tensor<T> out(x0.shape());
  for (std::size_t b = 0; b < n; ++b) {
    if (t[b] > sched.steps()) throw ParameterError("forward_closed: step out of range");
    const double ab = sched.a_bar(t[b]);
    const double cx = std::sqrt(ab), ce = std::sqrt(1.0 - ab);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = static_cast<T>(cx * x0[i] + ce * eps[i]);
  }
  return out;
}

template <typename T>
Tensor<T> forward_closed(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  std::vector<std::size_t> ts(x0.dim(0), t);
  return forward_closed(x0, std::span<const std::size_t>(ts), eps, sched);
}

/// Mean over batch and pixels of (eps - eps_theta(x_t, t))^2.
template <typename T>
Var<T> ddpm_loss(Graph<T>& g, const EpsModel<T>& model, const Tensor<T>& x0, std::span<const std::size_t> t,
                 const Tensor<T>& eps, const NoiseSchedule& sched) {
  for (auto s : t)
    if (s < 1 || s > sched.steps()) throw ParameterError("ddpm_loss: step out of range");
  auto xt = g.constant(forward_closed(x0, t, eps, sched));
  auto eps_hat = model(g, xt, t);
  return ops::squared_error(eps_hat, g.constant(eps));
}

/// One reverse step x_t -> x_{t-1}.
template <typename T>
Tensor<T> sample_step(const Tensor<T>& x_t, std::size_t t, const EpsPredictor<T>& predict,
                      const NoiseSchedule& sched, const SamplerConfig& cfg, Rng& rng) {
  if (t < 1 || t > sched.steps()) throw ParameterError("sample_step: step must lie in 1..T");
  const Tensor<T> eps = predict(x_t, t);
  if (eps.shape() != x_t.shape()) throw ShapeError("sample_step: predictor returned wrong shape");
  double cx, ce;
  if (cfg.mode == SamplerMode::literal_eq3) {
    const double ab = sched.a_bar(t);
    cx = 1.0 / std::sqrt(ab);
    ce = -std::sqrt(1.0 - ab) / std::sqrt(ab);
  } else {
    const double a = sched.a(t);
    cx = 1.0 / std::sqrt(a);
    ce = -cx * (1.0 - a) / std::sqrt(1.0 - sched.a_bar(t));
  }
  const double sigma = (cfg.sigma_mode == SigmaMode::beta && t > 1) ? std::sqrt(sched.beta(t)) : 0.0;
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = cx * x_t[i] + ce * eps[i];
    if (sigma > 0.0) v += sigma * rng.normal();
    out[i] = static_cast<T>(v);
  }
  return out;
}

/// Diagnostics gathered before the final clamp.
struct SampleStats {
  double max_abs = 0.0;
  double clamped_fraction = 0.0;
};

/// Ancestral sampling from x_T ~ N(0, I) down to x_0, clamped to [-1, 1] at
/// the end only. Images have shape (1, H, W); batches of `chunk` are run
/// through the predictor together. n = 0 yields no images.
template <typename T>
std::vector<Tensor<T>> sample(const EpsPredictor<T>& predict, const NoiseSchedule& sched, const SamplerConfig& cfg,
                              std::size_t n, std::size_t size, Rng& rng, SampleStats* stats = nullptr,
                              std::size_t chunk = 32) {
  std::vector<Tensor<T>> images;
  std::size_t clamped = 0, total = 0;
  double max_abs = 0.0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Tensor<T> x = rng.normal_tensor<T>({m, 1, size, size});
    for (std::size_t t = sched.steps(); t >= 1; --t) x = sample_step(x, t, predict, sched, cfg, rng);
    const std::size_t per = size * size;
    for (std::size_t b = 0; b < m; ++b) {
      Tensor<T> img(Shape{1, size, size});
      for (std::size_t i = 0; i < per; ++i) {
        const T v = x[b * per + i];
        max_abs = std::max(max_abs, static_cast<double>(std::abs(v)));
        if (v < T{-1} || v > T{1}) ++clamped;
        img[i] = std::clamp(v, T{-1}, T{1});
      }
      total += per;
      images.push_back(std::move(img));
    }
  }
  if (stats) {
    stats->max_abs = max_abs;
    stats->clamped_fraction = total ? static_cast<double>(clamped) / static_cast<double>(total) : 0.0;
  }
  return images;
}

}  // namespace dmoco
