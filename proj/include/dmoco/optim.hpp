#pragma once

#include <cmath>
#include <string>

#include "dmoco/autodiff.hpp"
#include "dmoco/serialize.hpp"

namespace dmoco {

namespace optim_detail {
template <typename T>
void check_matching(const ParamSet<T>& params, const ParamSet<T>& grads) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("missing gradient for '" + name + "'");
    if (it->second.shape() != p.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
  }
}
}  // namespace optim_detail

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
template <typename T>
class Sgd {
 public:
  Sgd(double momentum = 0.9, double weight_decay = 1e-4) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
    optim_detail::check_matching(params, grads);
    for (auto& [name, p] : params) {
      auto& v = velocity_.try_emplace(name, p.shape()).first->second;
      const auto& g = grads.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = g[i] + static_cast<T>(weight_decay_) * p[i];
        v[i] = static_cast<T>(momentum_) * v[i] + d;
        p[i] -= static_cast<T>(lr) * v[i];
      }
    }
  }

  void save(Archive& a, const std::string& prefix) const { put_params(a, prefix + "velocity/", velocity_); }
  void load(const Archive& a, const std::string& prefix) { velocity_ = get_params<T>(a, prefix + "velocity/"); }

 private:
  double momentum_, weight_decay_;
  ParamSet<T> velocity_;
};

template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
    optim_detail::check_matching(params, grads);
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto& m = m_.try_emplace(name, p.shape()).first->second;
      auto& v = v_.try_emplace(name, p.shape()).first->second;
      const auto& g = grads.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
        v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
        p[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

  void save(Archive& a, const std::string& prefix) const {
    put_params(a, prefix + "m/", m_);
    put_params(a, prefix + "v/", v_);
    a.put_scalar(prefix + "t", static_cast<double>(t_));
  }
  void load(const Archive& a, const std::string& prefix) {
    m_ = get_params<T>(a, prefix + "m/");
    v_ = get_params<T>(a, prefix + "v/");
    t_ = static_cast<std::size_t>(a.get_scalar(prefix + "t"));
  }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  ParamSet<T> m_, v_;
};

}  // namespace dmoco
