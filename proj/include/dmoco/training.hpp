#pragma once

// Training loops for the per-class denoisers and for contrastive
// pretraining. Every optimizer step draws its randomness from a stream
// derived from (seed, step), so a run resumed from a checkpoint replays
// exactly the steps an uninterrupted run would have taken.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "dmoco/data.hpp"
#include "dmoco/denoiser.hpp"
#include "dmoco/diffusion.hpp"
#include "dmoco/moco.hpp"
#include "dmoco/optim.hpp"
#include "dmoco/schedule.hpp"
#include "dmoco/serialize.hpp"

namespace dmoco {

using StepLogger = std::function<void(std::size_t step, double loss, double lr)>;

namespace train_detail {

inline constexpr std::uint64_t kDdpmStream = 0xDD9Full << 40;
inline constexpr std::uint64_t kMocoStream = 0x3C0Cull << 40;

/// `n` distinct indices drawn uniformly from `pool` (with replacement when
/// the pool is smaller than n).
inline std::vector<std::size_t> draw_batch(const std::vector<std::size_t>& pool, std::size_t n, Rng& rng) {
  if (pool.empty()) throw ParameterError("cannot draw a batch from an empty set");
  std::vector<std::size_t> out;
  if (pool.size() >= n) {
    std::vector<std::size_t> order = pool;
    // Partial Fisher-Yates: only the first n positions are needed.
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i),
                                                          static_cast<std::int64_t>(order.size() - 1)));
      std::swap(order[i], order[j]);
    }
    out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(pool[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(pool.size() - 1)))]);
  }
  return out;
}

}  // namespace train_detail

// ---------------------------------------------------------------- DDPM

struct DdpmTrainConfig {
  std::size_t total_steps = 2000;
  std::size_t batch = 16;
  double lr0 = 2e-3;
  std::size_t steps_per_epoch = 0;  // non-zero: cosine over epochs
};

template <typename T>
struct DdpmState {
  DenoiserConfig net;
  ParamSet<T> theta;
  Adam<T> optimizer;
  std::size_t step = 0;
};

template <typename T>
DdpmState<T> init_ddpm(std::uint64_t seed, const DenoiserConfig& net) {
  return DdpmState<T>{net, init_denoiser<T>(seed, net), Adam<T>(), 0};
}

/// One Adam step on a random batch of `images` (n, 1, H, H): uniform t per
/// element, standard-normal eps, eps-prediction MSE.
template <typename T>
double ddpm_step(DdpmState<T>& s, const Tensor<T>& images, const NoiseSchedule& sched, const DdpmTrainConfig& cfg,
                 std::uint64_t seed) {
  Rng rng = Rng::derived(seed, train_detail::kDdpmStream | s.step);
  std::vector<std::size_t> pool(images.dim(0));
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  const auto x0 = gather(images, train_detail::draw_batch(pool, cfg.batch, rng));
  std::vector<std::size_t> t(cfg.batch);
  for (auto& v : t) v = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(sched.steps())));
  const auto eps = rng.normal_tensor<T>(x0.shape());
  Graph<T> g;
  auto loss = ddpm_loss<T>(g, make_eps_model(s.theta, s.net, true), x0, t, eps, sched);
  const double value = static_cast<double>(loss.value().item());
  const auto grads = g.backward(loss);
  const LrSchedule lr{cfg.lr0, cfg.total_steps, cfg.steps_per_epoch};
  s.optimizer.step(s.theta, grads.named, lr.rate(s.step));
  ++s.step;
  return value;
}

/// Runs until s.step == min(stop_at, cfg.total_steps), logging
/// (step, loss, lr). Stopping early keeps the full-length LR schedule.
template <typename T>
void train_ddpm(DdpmState<T>& s, const Tensor<T>& images, const NoiseSchedule& sched, const DdpmTrainConfig& cfg,
                std::uint64_t seed, const StepLogger& log = {}, std::size_t stop_at = SIZE_MAX) {
  if (cfg.batch == 0 || cfg.total_steps == 0) throw ParameterError("batch and total_steps must be positive");
  if (s.step > cfg.total_steps) throw StateError("checkpoint is past the configured total_steps");
  const LrSchedule lr{cfg.lr0, cfg.total_steps, cfg.steps_per_epoch};
  const std::size_t end = std::min(stop_at, cfg.total_steps);
  while (s.step < end) {
    const double rate = lr.rate(s.step);
    const double loss = ddpm_step(s, images, sched, cfg, seed);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(s.step));
    if (log) log(s.step, loss, rate);
  }
}

template <typename T>
Archive ddpm_checkpoint(const DdpmState<T>& s, const NoiseSchedule& sched) {
  Archive a;
  put_params(a, "theta/", s.theta);
  s.optimizer.save(a, "optim/");
  sched.save(a);
  a.put_scalar("step", static_cast<double>(s.step));
  a.put_scalar("net/width_base", static_cast<double>(s.net.width_base));
  a.put_scalar("net/time_dim", static_cast<double>(s.net.time_dim));
  a.put_scalar("net/heads", static_cast<double>(s.net.heads));
  a.put_scalar("net/max_t", static_cast<double>(s.net.max_t));
  return a;
}

template <typename T>
DdpmState<T> load_ddpm(const Archive& a) {
  DdpmState<T> s;
  auto size = [&](const char* k) { return static_cast<std::size_t>(a.get_scalar(k)); };
  s.net = DenoiserConfig{size("net/width_base"), size("net/time_dim"), size("net/heads"), size("net/max_t")};
  s.net.validate();
  s.theta = get_params<T>(a, "theta/");
  const auto expected = init_denoiser<T>(0, s.net);
  for (const auto& [name, t] : expected) {
    auto it = s.theta.find(name);
    if (it == s.theta.end() || it->second.shape() != t.shape())
      throw FormatError("checkpoint parameter '" + name + "' missing or mis-shaped", 0);
  }
  s.optimizer.load(a, "optim/");
  s.step = size("step");
  return s;
}

// ---------------------------------------------------------------- MoCo

/// Runs contrastive pretraining on `pool` (indices into images) until
/// s.step == min(stop_at, cfg.lr.total_steps). The first call only seeds the
/// empty queue and is not counted. Warmup steps (queue not yet full) train
/// and count but are not logged.
template <typename T>
void train_moco(MocoState<T>& s, const Tensor<T>& images, const std::vector<std::size_t>& pool,
                const ContrastConfig& cfg, std::uint64_t seed, const StepLogger& log = {},
                std::size_t stop_at = SIZE_MAX) {
  cfg.validate();
  if (s.step > cfg.lr.total_steps) throw StateError("checkpoint is past the configured total_steps");
  const std::size_t end = std::min(stop_at, cfg.lr.total_steps);
  while (s.step < end) {
    const bool seeding = s.queue.filled() == 0;
    const std::uint64_t tag = seeding ? std::uint64_t{1} << 32 : s.step;
    Rng rng = Rng::derived(seed, train_detail::kMocoStream | tag);
    const auto batch = gather(images, train_detail::draw_batch(pool, cfg.batch, rng));
    const auto r = moco_train_step(s, batch, cfg, rng);
    if (seeding) continue;
    if (!std::isfinite(r.loss)) throw NumericError("non-finite contrastive loss at step " + std::to_string(s.step));
    if (log && !r.warmup) log(s.step, r.loss, r.lr);
  }
}

}  // namespace dmoco
