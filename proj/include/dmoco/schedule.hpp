#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "dmoco/error.hpp"
#include "dmoco/serialize.hpp"

namespace dmoco {

/// Per-step noise variances with their running products. Index t runs from
/// 1 to T; a_bar(0) is 1 by convention.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
    if (beta_.empty()) throw ParameterError("noise schedule needs at least one step");
    a_.resize(beta_.size());
    a_bar_.resize(beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0))
        throw ParameterError("beta_" + std::to_string(i + 1) + " must lie in (0,1)");
      a_[i] = 1.0 - beta_[i];
      prod *= a_[i];
      a_bar_[i] = prod;
    }
  }

  std::size_t steps() const noexcept { return beta_.size(); }
  double beta(std::size_t t) const { return beta_.at(index(t)); }
  double a(std::size_t t) const { return a_.at(index(t)); }
  double a_bar(std::size_t t) const { return t == 0 ? 1.0 : a_bar_.at(index(t)); }

  const std::vector<double>& betas() const noexcept { return beta_; }
  const std::vector<double>& as() const noexcept { return a_; }
  const std::vector<double>& a_bars() const noexcept { return a_bar_; }

  void save(Archive& archive) const {
    archive.put("beta", Tensor<double>(Shape{steps()}, beta_));
    archive.put("a", Tensor<double>(Shape{steps()}, a_));
    archive.put("a_bar", Tensor<double>(Shape{steps()}, a_bar_));
  }

  /// Rebuilds from the stored betas and verifies the stored products.
  static NoiseSchedule load(const Archive& archive) {
    const auto beta = archive.get<double>("beta");
    NoiseSchedule s(beta.values());
    if (archive.get<double>("a_bar").values() != s.a_bars() || archive.get<double>("a").values() != s.as())
      throw FormatError("stored noise schedule is inconsistent with its betas", 0);
    return s;
  }

 private:
  std::size_t index(std::size_t t) const {
    if (t < 1 || t > beta_.size())
      throw ParameterError("step " + std::to_string(t) + " outside 1.." + std::to_string(beta_.size()));
    return t - 1;
  }

  std::vector<double> beta_, a_, a_bar_;
};

/// Betas linearly interpolated from beta_start to beta_end inclusive.
inline NoiseSchedule make_linear_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw ParameterError("T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("need 0 < beta_start <= beta_end < 1");
  std::vector<double> beta(T);
  for (std::size_t i = 0; i < T; ++i)
    beta[i] = T == 1 ? beta_start
                     : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  return NoiseSchedule(std::move(beta));
}

/// lr0 * (1 + cos(pi * current / total)) / 2
inline double cosine_lr(std::size_t current_steps, std::size_t total_steps, double lr0) {
  if (total_steps < 1) throw ParameterError("total_steps must be at least 1");
  if (current_steps > total_steps) throw ParameterError("current_steps exceeds total_steps");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(current_steps) / static_cast<double>(total_steps)));
}

/// Cosine learning-rate schedule over optimizer steps, or over epochs when
/// steps_per_epoch is non-zero (the rate is then constant within an epoch).
struct LrSchedule {
  double lr0 = 0.03;
  std::size_t total_steps = 1;
  std::size_t steps_per_epoch = 0;

  double rate(std::size_t step) const {
    if (!(lr0 > 0.0)) throw ParameterError("lr0 must be positive");
    if (steps_per_epoch == 0) return cosine_lr(step, total_steps, lr0);
    const std::size_t epochs = (total_steps + steps_per_epoch - 1) / steps_per_epoch;
    return cosine_lr(std::min(step / steps_per_epoch, epochs), epochs, lr0);
  }
};

}  // namespace dmoco
