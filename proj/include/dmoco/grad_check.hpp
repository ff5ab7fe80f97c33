#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "dmoco/autodiff.hpp"

namespace dmoco {

/// Scalar-valued function of one differentiable input, built on a graph.
using ScalarFn = std::function<Var<double>(Graph<double>&, const Var<double>&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> analytic;
  {
    Graph<double> g;
    auto xv = g.leaf(x);
    auto loss = f(g, xv);
    analytic = g.backward(loss).of(xv);
  }
  auto eval = [&](const Tensor<double>& at) {
    Graph<double> g;
    return f(g, g.constant(at)).value().item();
  };
  double worst = 0.0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    probe[i] = orig + h;
    const double up = eval(probe);
    probe[i] = orig - h;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

/// Same check applied to one named parameter of a parameter set; `f` binds
/// the parameters itself and returns the scalar loss.
using ParamLossFn = std::function<Var<double>(Graph<double>&, const BoundParams<double>&)>;

inline double grad_check_params(const ParamLossFn& f, const ParamSet<double>& params, const std::string& name,
                                double h = 1e-5) {
  Tensor<double> analytic;
  {
    Graph<double> g;
    auto bound = g.bind(params, true);
    analytic = g.backward(f(g, bound))[name];
  }
  ParamSet<double> probe = params;
  auto eval = [&]() {
    Graph<double> g;
    return f(g, g.bind(probe, false)).value().item();
  };
  double worst = 0.0;
  auto& t = probe.at(name);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double orig = t[i];
    t[i] = orig + h;
    const double up = eval();
    t[i] = orig - h;
    const double down = eval();
    t[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace dmoco
