#pragma once

// Linear probe on frozen encoder features and the reported metrics:
// per-class precision/recall, PR curves and AP, Frechet distance between
// feature Gaussians, and an inception-style score over class posteriors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "dmoco/autodiff.hpp"
#include "dmoco/data.hpp"
#include "dmoco/encoder.hpp"
#include "dmoco/optim.hpp"
#include "dmoco/schedule.hpp"

namespace dmoco {

// ---------------------------------------------------------------- probe

template <typename T>
struct LinearProbe {
  // Features are standardised with the training-set statistics, then mapped
  // by x * w + b to class logits.
  Tensor<T> shift, inv_scale;  // (c')
  Tensor<T> w;                 // (c', kNumClasses)
  Tensor<T> b;                 // (kNumClasses)

  std::size_t feature_dim() const { return w.dim(0); }

  Tensor<T> standardize(const Tensor<T>& features) const {
    if (features.rank() != 2 || features.dim(1) != feature_dim())
      throw ShapeError("probe expects features (n, " + std::to_string(feature_dim()) + "), got " +
                       to_string(features.shape()));
    Tensor<T> out = features;
    const std::size_t C = feature_dim();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - shift[i % C]) * inv_scale[i % C];
    return out;
  }

  Tensor<T> logits(const Tensor<T>& features) const {
    Graph<T> g;
    auto x = g.constant(standardize(features));
    return ops::add(ops::matmul(x, g.constant(w)), g.constant(b.reshaped(Shape{1, kNumClasses}))).value();
  }

  /// Softmax class posteriors (n, kNumClasses).
  Tensor<T> probabilities(const Tensor<T>& features) const {
    Graph<T> g;
    return ops::softmax(g.constant(logits(features))).value();
  }

  std::vector<int> predict(const Tensor<T>& features) const {
    const auto l = logits(features);
    std::vector<int> out(l.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
      const auto row = l.data().subspan(r * kNumClasses, kNumClasses);
      out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }

  void save(Archive& a) const {
    a.put("probe/shift", shift);
    a.put("probe/inv_scale", inv_scale);
    a.put("probe/w", w);
    a.put("probe/b", b);
  }

  static LinearProbe load(const Archive& a) {
    return LinearProbe{a.get<T>("probe/shift"), a.get<T>("probe/inv_scale"), a.get<T>("probe/w"), a.get<T>("probe/b")};
  }
};

struct ProbeConfig {
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Initial probe for features of width c: statistics from `features`,
/// small random weights, zero bias.
template <typename T>
LinearProbe<T> init_probe(const Tensor<T>& features, Rng& rng) {
  if (features.rank() != 2 || features.dim(0) == 0) throw ParameterError("probe needs a non-empty feature matrix");
  const std::size_t n = features.dim(0), C = features.dim(1);
  LinearProbe<T> p{Tensor<T>(Shape{C}), Tensor<T>(Shape{C}), Tensor<T>(Shape{C, kNumClasses}),
                   Tensor<T>(Shape{kNumClasses})};
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t r = 0; r < n; ++r) s += features[r * C + c];
    const double mu = s / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) s2 += (features[r * C + c] - mu) * (features[r * C + c] - mu);
    const double sd = std::sqrt(s2 / static_cast<double>(n));
    p.shift[c] = static_cast<T>(mu);
    p.inv_scale[c] = static_cast<T>(1.0 / std::max(sd, 1e-6));
  }
  const double init_std = 0.01;
  for (auto& v : p.w.data()) v = static_cast<T>(rng.normal() * init_std);
  return p;
}

/// Softmax cross-entropy on cached features; only the probe weights change.
template <typename T>
LinearProbe<T> train_probe_on_features(const Tensor<T>& features, std::span<const int> labels,
                                       const ProbeConfig& cfg, Rng& rng) {
  if (features.rank() != 2 || features.dim(0) == 0 || labels.empty()) throw ParameterError("empty probe training set");
  if (labels.size() != features.dim(0)) throw ContractError("one label per feature row required");
  for (int l : labels)
    if (l < 0 || l >= kNumClasses) throw ParameterError("label out of range");
  auto probe = init_probe(features, rng);
  if (cfg.epochs == 0) return probe;
  if (cfg.batch == 0) throw ParameterError("probe batch must be positive");
  const auto x_all = probe.standardize(features);
  const std::size_t n = features.dim(0), C = features.dim(1);
  const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const LrSchedule lr{cfg.lr0, cfg.epochs * per_epoch, 0};
  Sgd<T> opt(cfg.momentum, cfg.weight_decay);
  ParamSet<T> params{{"w", probe.w}, {"b", probe.b}};
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t m = std::min(cfg.batch, n - start);
      Tensor<T> xb(Shape{m, C});
      std::vector<int> yb(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t r = order[start + i];
        std::copy_n(x_all.data().begin() + static_cast<std::ptrdiff_t>(r * C), C,
                    xb.data().begin() + static_cast<std::ptrdiff_t>(i * C));
        yb[i] = labels[r];
      }
      Graph<T> g;
      auto p = g.bind(params, true);
      auto logits = ops::add(ops::matmul(g.constant(std::move(xb)), p.at("w")), ops::reshape(p.at("b"), Shape{1, kNumClasses}));
      auto loss = ops::softmax_cross_entropy<T>(logits, yb);
      const auto grads = g.backward(loss);
      opt.step(params, grads.named, lr.rate(step++));
    }
  }
  probe.w = params.at("w");
  probe.b = params.at("b");
  return probe;
}

/// Caches frozen-encoder features for the given images, then trains the probe.
template <typename T>
LinearProbe<T> train_probe(const ParamSet<T>& encoder, const Tensor<T>& images, std::span<const int> labels,
                           const ProbeConfig& cfg, Rng& rng) {
  if (images.rank() == 0 || images.dim(0) == 0 || labels.empty()) throw ParameterError("empty probe training set");
  return train_probe_on_features(extract_features(encoder, images), labels, cfg, rng);
}

inline double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size() || preds.empty()) throw ContractError("accuracy needs equal, non-empty inputs");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------- ranking metrics

/// One-vs-rest precision and recall for `cls`; 0 where undefined.
inline std::pair<double, double> precision_recall(std::span<const int> preds, std::span<const int> labels, int cls) {
  if (preds.size() != labels.size() || preds.empty())
    throw ContractError("precision_recall needs equal, non-empty inputs");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == cls, l = labels[i] == cls;
    tp += p && l;
    fp += p && !l;
    fn += !p && l;
  }
  const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return {precision, recall};
}

struct PrCurve {
  std::vector<double> thresholds;  // descending
  std::vector<double> precision;
  std::vector<double> recall;
  double ap = 0.0;
};

/// Ranked sweep (descending score, ties by index); one point per sample.
inline PrCurve pr_curve(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractError("pr_curve needs one label per score");
  std::size_t positives = 0;
  for (int l : labels) positives += l != 0;
  if (positives == 0) throw UndefinedError("average precision is undefined without positives");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  PrCurve c;
  // Step interpolation: recall only moves at positives, by 1/positives.
  std::size_t tp = 0;
  double precision_sum = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const bool hit = labels[order[k]] != 0;
    tp += hit;
    const double p = static_cast<double>(tp) / static_cast<double>(k + 1);
    const double r = static_cast<double>(tp) / static_cast<double>(positives);
    if (hit) precision_sum += p;
    c.thresholds.push_back(scores[order[k]]);
    c.precision.push_back(p);
    c.recall.push_back(r);
  }
  c.ap = precision_sum / static_cast<double>(positives);
  return c;
}

inline double average_precision(std::span<const double> scores, std::span<const int> labels) {
  return pr_curve(scores, labels).ap;
}

struct MeanAp {
  double map = 0.0;
  std::array<double, kNumClasses> per_class{};
};

/// Unweighted mean of the one-vs-rest APs; scores is (n, kNumClasses).
template <typename T>
MeanAp mean_ap(const Tensor<T>& scores, std::span<const int> labels) {
  if (scores.rank() != 2 || scores.dim(1) != kNumClasses || scores.dim(0) != labels.size())
    throw ContractError("mean_ap needs (n, " + std::to_string(kNumClasses) + ") scores and n labels");
  MeanAp out;
  const std::size_t n = labels.size();
  for (int k = 0; k < kNumClasses; ++k) {
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(scores[i * kNumClasses + static_cast<std::size_t>(k)]);
      y[i] = labels[i] == k;
    }
    if (std::find(y.begin(), y.end(), 1) == y.end())
      throw UndefinedError(std::string("class ") + class_name(static_cast<DefectClass>(k)) + " absent from labels");
    out.per_class[static_cast<std::size_t>(k)] = average_precision(s, y);
  }
  out.map = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / kNumClasses;
  return out;
}

// ---------------------------------------------------------------- distribution metrics

/// Dense row-major symmetric matrix helpers for the Frechet distance.
namespace linalg {

using Matrix = std::vector<double>;

struct Eigen {
  std::vector<double> values;
  Matrix vectors;  // columns are eigenvectors
};

/// Cyclic Jacobi rotations on a symmetric d x d matrix.
inline Eigen jacobi_eigen(Matrix a, std::size_t d) {
  Matrix v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  double scale = 0.0;
  for (double x : a) scale = std::max(scale, std::abs(x));
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    if (off <= 1e-30 * std::max(1.0, scale * scale)) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = v[k * d + p], vkq = v[k * d + q];
          v[k * d + p] = c * vkp - s * vkq;
          v[k * d + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  Eigen e{std::vector<double>(d), std::move(v)};
  for (std::size_t i = 0; i < d; ++i) e.values[i] = a[i * d + i];
  return e;
}

inline double clamp_eigenvalue(double lambda) {
  if (lambda < -1e-6) throw NumericError("matrix is not positive semi-definite (eigenvalue " + std::to_string(lambda) + ")");
  return std::max(lambda, 0.0);
}

/// Symmetric PSD square root.
inline Matrix sqrtm_psd(const Matrix& a, std::size_t d) {
  const auto e = jacobi_eigen(a, d);
  Matrix out(d * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double s = std::sqrt(clamp_eigenvalue(e.values[k]));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += s * e.vectors[i * d + k] * e.vectors[j * d + k];
  }
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b, std::size_t d) {
  Matrix c(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t j = 0; j < d; ++j) c[i * d + j] += a[i * d + k] * b[k * d + j];
  return c;
}

}  // namespace linalg

struct FeatureGaussian {
  std::vector<double> mu;
  linalg::Matrix sigma;  // row-major d x d

  std::size_t dim() const { return mu.size(); }
};

/// Mean and unbiased covariance of the rows of `features` (m, d), m >= 2.
template <typename T>
FeatureGaussian fit_gaussian(const Tensor<T>& features) {
  if (features.rank() != 2) throw ShapeError("features must be (m, d)");
  const std::size_t m = features.dim(0), d = features.dim(1);
  if (m < 2) throw ParameterError("covariance needs at least two samples");
  FeatureGaussian g{std::vector<double>(d, 0.0), linalg::Matrix(d * d, 0.0)};
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) g.mu[c] += features[r * d + c];
  for (auto& v : g.mu) v /= static_cast<double>(m);
  std::vector<double> x(d);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < d; ++c) x[c] = features[r * d + c] - g.mu[c];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) g.sigma[i * d + j] += x[i] * x[j];
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      g.sigma[i * d + j] /= static_cast<double>(m - 1);
      g.sigma[j * d + i] = g.sigma[i * d + j];
    }
  return g;
}

inline double frechet_distance(const FeatureGaussian& g1, const FeatureGaussian& g2) {
  const std::size_t d = g1.dim();
  if (g2.dim() != d || g1.sigma.size() != d * d || g2.sigma.size() != d * d)
    throw ContractError("frechet_distance: dimension mismatch");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_term += (g1.mu[i] - g2.mu[i]) * (g1.mu[i] - g2.mu[i]);
  const auto s1h = linalg::sqrtm_psd(g1.sigma, d);
  auto inner = linalg::matmul(linalg::matmul(s1h, g2.sigma, d), s1h, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) inner[i * d + j] = inner[j * d + i] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
  double tr_sqrt = 0.0;
  for (double lambda : linalg::jacobi_eigen(inner, d).values) tr_sqrt += std::sqrt(linalg::clamp_eigenvalue(lambda));
  double tr = 0.0;
  for (std::size_t i = 0; i < d; ++i) tr += g1.sigma[i * d + i] + g2.sigma[i * d + i];
  return std::max(0.0, mean_term + tr - 2.0 * tr_sqrt);
}

/// exp(mean_m KL(p_m || p_bar)) for posteriors (m, k) whose rows sum to 1.
template <typename T>
double inception_style_score(const Tensor<T>& probs) {
  if (probs.rank() != 2 || probs.dim(0) == 0) throw ShapeError("posteriors must be a non-empty (m, k) matrix");
  const std::size_t m = probs.dim(0), k = probs.dim(1);
  std::vector<double> bar(k, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = probs[r * k + c];
      if (!(p >= 0.0)) throw ContractError("posterior entries must be non-negative");
      s += p;
      bar[c] += p;
    }
    if (std::abs(s - 1.0) > 1e-6) throw ContractError("posterior row " + std::to_string(r) + " does not sum to 1");
  }
  for (auto& v : bar) v /= static_cast<double>(m);
  double kl = 0.0;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < k; ++c) {
      const double p = probs[r * k + c];
      if (p > 0.0) kl += p * std::log(p / bar[c]);
    }
  return std::exp(kl / static_cast<double>(m));
}

}  // namespace dmoco
