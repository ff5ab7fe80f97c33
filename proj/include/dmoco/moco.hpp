#pragma once

// Momentum contrast: a query encoder trained by gradient descent, a key
// encoder that tracks it by exponential moving average, and a FIFO queue of
// past keys serving as negatives. Two losses are available: the per-query
// InfoNCE and the batch-level variant that scores every query against every
// positive key of the mini-batch.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dmoco/autodiff.hpp"
#include "dmoco/data.hpp"
#include "dmoco/encoder.hpp"
#include "dmoco/optim.hpp"
#include "dmoco/schedule.hpp"

namespace dmoco {

enum class LossMode { original, improved };

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "original") return LossMode::original;
  if (s == "improved") return LossMode::improved;
  throw ParameterError("unknown loss mode '" + s + "' (expected original or improved)");
}

inline const char* loss_mode_name(LossMode m) { return m == LossMode::original ? "original" : "improved"; }

inline constexpr double kUnitNormTolerance = 1e-3;

namespace moco_detail {
template <typename T>
void require_unit_rows(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " must be (rows, width), got " + to_string(t.shape()));
  const std::size_t C = t.dim(1);
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += static_cast<double>(t[r * C + c]) * t[r * C + c];
    if (std::abs(std::sqrt(s) - 1.0) > kUnitNormTolerance)
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " is not unit-norm");
  }
}

template <typename T>
void check_contrast_inputs(const Var<T>& q, const Var<T>& k, const Var<T>& neg, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
  require_unit_rows(q.value(), "query");
  require_unit_rows(k.value(), "positive key");
  require_unit_rows(neg.value(), "negative key");
  if (q.shape() != k.shape() || neg.dim(1) != q.dim(1))
    throw ShapeError("contrastive inputs disagree: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                     ", negatives " + to_string(neg.shape()));
}
}  // namespace moco_detail

/// Mean over queries b of -log(exp(q_b.k_b/tau) / (exp(q_b.k_b/tau) + sum_i exp(q_b.neg_i/tau))).
template <typename T>
Var<T> info_nce(const Var<T>& q, const Var<T>& k_pos, const Var<T>& negatives, double tau) {
  moco_detail::check_contrast_inputs(q, k_pos, negatives, tau);
  const std::size_t n = q.dim(0);
  const T inv = static_cast<T>(1.0 / tau);
  auto l_pos = ops::reshape(ops::sum_last(ops::mul(q, k_pos)), Shape{n, 1});
  auto l_neg = ops::matmul(q, ops::transpose(negatives));
  auto logits = ops::scale(ops::concat<T>({l_pos, l_neg}, 1), inv);
  const std::vector<int> positive(n, 0);
  return ops::softmax_cross_entropy<T>(logits, positive);
}

/// Batch-level contrast: each (query b, positive key j) pair forms its own
/// (K+1)-way softmax against the queue negatives; the loss is the mean over
/// all n*n pairs.
template <typename T>
Var<T> batch_contrastive(const Var<T>& q, const Var<T>& k_pos, const Var<T>& negatives, double tau) {
  moco_detail::check_contrast_inputs(q, k_pos, negatives, tau);
  auto& g = q.graph();
  const std::size_t n = q.dim(0);
  const T inv = static_cast<T>(1.0 / tau);
  auto pos = ops::scale(ops::matmul(q, ops::transpose(k_pos)), inv);             // (n, n)
  auto neg_lse = ops::logsumexp(ops::scale(ops::matmul(q, ops::transpose(negatives)), inv));  // (n)
  auto neg_b = ops::add(g.constant(Tensor<T>(Shape{n, n, 1})), ops::reshape(neg_lse, Shape{n, 1, 1}));
  auto pair = ops::concat<T>({ops::reshape(pos, Shape{n, n, 1}), neg_b}, 2);     // (n, n, 2)
  return ops::mean(ops::sub(ops::logsumexp(pair), pos));
}

template <typename T>
Var<T> contrastive_loss(LossMode mode, const Var<T>& q, const Var<T>& k_pos, const Var<T>& negatives, double tau) {
  return mode == LossMode::original ? info_nce(q, k_pos, negatives, tau) : batch_contrastive(q, k_pos, negatives, tau);
}

/// theta_k <- m theta_k + (1 - m) theta_q for every tensor.
template <typename T>
void momentum_update(ParamSet<T>& theta_k, const ParamSet<T>& theta_q, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
  if (theta_k.size() != theta_q.size()) throw ContractError("momentum_update: parameter sets differ");
  for (const auto& [name, q] : theta_q) {
    auto it = theta_k.find(name);
    if (it == theta_k.end()) throw ContractError("momentum_update: key encoder lacks '" + name + "'");
    if (it->second.shape() != q.shape()) throw ContractError("momentum_update: shape mismatch for '" + name + "'");
  }
  const T mk = static_cast<T>(m), mq = static_cast<T>(1.0 - m);
  for (auto& [name, k] : theta_k) {
    const auto& q = theta_q.at(name);
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = mk * k[i] + mq * q[i];
  }
}

/// Fixed-capacity FIFO ring of unit-norm key rows.
template <typename T>
class KeyQueue {
 public:
  KeyQueue(std::size_t capacity, std::size_t width) : storage_(Shape{capacity, width}) {}

  std::size_t capacity() const { return storage_.dim(0); }
  std::size_t width() const { return storage_.dim(1); }
  std::size_t head() const noexcept { return head_; }
  std::size_t filled() const noexcept { return filled_; }
  bool full() const noexcept { return filled_ == capacity(); }
  const Tensor<T>& storage() const noexcept { return storage_; }

  /// Writes the rows at head, wrapping modulo capacity; once full, the
  /// overwritten rows are exactly the oldest ones.
  void push(const Tensor<T>& keys) {
    if (keys.rank() != 2 || keys.dim(1) != width())
      throw ContractError("queue width " + std::to_string(width()) + " does not match keys " + to_string(keys.shape()));
    if (keys.dim(0) > capacity()) throw ContractError("cannot enqueue more rows than the queue holds");
    moco_detail::require_unit_rows(keys, "queued key");
    const std::size_t C = width();
    for (std::size_t r = 0; r < keys.dim(0); ++r) {
      std::copy_n(keys.data().begin() + static_cast<std::ptrdiff_t>(r * C), C,
                  storage_.data().begin() + static_cast<std::ptrdiff_t>(head_ * C));
      head_ = (head_ + 1) % capacity();
    }
    filled_ = std::min(capacity(), filled_ + keys.dim(0));
  }

  /// The valid rows (filled, width); storage order, not age order.
  Tensor<T> negatives() const {
    if (filled_ == 0) throw StateError("queue is empty");
    if (full()) return storage_;
    return Tensor<T>(Shape{filled_, width()},
                     std::vector<T>(storage_.data().begin(),
                                    storage_.data().begin() + static_cast<std::ptrdiff_t>(filled_ * width())));
  }

  /// Rows from oldest to newest.
  std::vector<std::vector<T>> rows_by_age() const {
    std::vector<std::vector<T>> out;
    const std::size_t start = full() ? head_ : 0;
    for (std::size_t i = 0; i < filled_; ++i) {
      const std::size_t r = (start + i) % capacity();
      out.emplace_back(storage_.data().begin() + static_cast<std::ptrdiff_t>(r * width()),
                       storage_.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * width()));
    }
    return out;
  }

  void save(Archive& a) const {
    a.put("queue/storage", storage_);
    a.put_scalar("queue/head", static_cast<double>(head_));
    a.put_scalar("queue/filled", static_cast<double>(filled_));
  }

  static KeyQueue load(const Archive& a) {
    auto storage = a.get<T>("queue/storage");
    KeyQueue q(storage.dim(0), storage.dim(1));
    q.storage_ = std::move(storage);
    q.head_ = static_cast<std::size_t>(a.get_scalar("queue/head"));
    q.filled_ = static_cast<std::size_t>(a.get_scalar("queue/filled"));
    if (q.head_ >= q.capacity() || q.filled_ > q.capacity()) throw FormatError("queue state out of range", 0);
    return q;
  }

 private:
  Tensor<T> storage_;
  std::size_t head_ = 0;
  std::size_t filled_ = 0;
};

template <typename T>
KeyQueue<T> queue_push(KeyQueue<T> queue, const Tensor<T>& keys) {
  queue.push(keys);
  return queue;
}

struct ContrastConfig {
  double tau = 0.07;
  double m = 0.999;
  std::size_t K = 512;
  std::size_t batch = 32;
  LossMode loss_mode = LossMode::improved;
  LrSchedule lr{0.03, 2000, 0};
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  ViewAugment augment{};

  void validate() const {
    if (!(tau > 0.0)) throw ParameterError("tau must be positive");
    if (!(m >= 0.0 && m < 1.0)) throw ParameterError("m must lie in [0, 1)");
    if (batch == 0) throw ParameterError("batch must be positive");
    if (K == 0 || K % batch) throw ParameterError("K must be a positive multiple of the batch size");
  }
};

template <typename T>
struct MocoState {
  EncoderConfig encoder;
  ParamSet<T> theta_q, theta_k;
  KeyQueue<T> queue;
  Sgd<T> optimizer;
  std::size_t step = 0;
};

template <typename T>
MocoState<T> init_moco(std::uint64_t seed, const EncoderConfig& enc, const ContrastConfig& cfg) {
  cfg.validate();
  auto theta_q = init_encoder<T>(seed, enc);
  return MocoState<T>{enc, theta_q, theta_q, KeyQueue<T>(cfg.K, enc.embed_dim),
                      Sgd<T>(cfg.sgd_momentum, cfg.weight_decay), 0};
}

template <typename T>
struct ContrastViews {
  Tensor<T> query, key;
};

/// Two independent random views of every image in the batch.
template <typename T>
ContrastViews<T> make_views(const Tensor<T>& batch, Rng& rng, const ViewAugment& aug) {
  std::vector<Tensor<T>> a, b;
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    const auto img = image_at(batch, i);
    a.push_back(random_view(img, rng, aug));
    b.push_back(random_view(img, rng, aug));
  }
  return {stack(a), stack(b)};
}

/// Keys from the key encoder; no gradient path.
template <typename T>
Tensor<T> key_embeddings(const ParamSet<T>& theta_k, const Tensor<T>& views) {
  Graph<T> g;
  return encoder_embed(g.bind(theta_k, false), g.constant(views)).value();
}

/// Contrastive loss of the query encoder for precomputed keys and negatives.
template <typename T>
Var<T> query_loss(Graph<T>& g, const BoundParams<T>& theta_q, const Tensor<T>& query_views, const Tensor<T>& keys,
                  const Tensor<T>& negatives, double tau, LossMode mode) {
  auto q = encoder_embed(theta_q, g.constant(query_views));
  return contrastive_loss(mode, q, g.constant(keys), g.constant(negatives), tau);
}

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  bool warmup = false;  // computed against a partially filled queue
};

namespace moco_detail {
template <typename T>
StepResult contrast_step(MocoState<T>& s, const Tensor<T>& batch, const ContrastConfig& cfg, Rng& rng,
                         bool allow_partial) {
  if (!allow_partial && !s.queue.full()) throw StateError("moco_step requires a filled queue");
  if (batch.dim(0) != cfg.batch) throw ShapeError("batch size does not match configuration");
  const auto views = make_views(batch, rng, cfg.augment);
  const auto keys = key_embeddings(s.theta_k, views.key);
  StepResult r;
  r.warmup = !s.queue.full();
  if (s.queue.filled() == 0) {
    // Nothing to contrast against yet: only seed the dictionary.
    s.queue.push(keys);
    r.loss = std::nan("");
    return r;
  }
  Graph<T> g;
  auto bound = g.bind(s.theta_q, true);
  auto loss = query_loss(g, bound, views.query, keys, s.queue.negatives(), cfg.tau, cfg.loss_mode);
  r.loss = static_cast<double>(loss.value().item());
  r.lr = cfg.lr.rate(s.step);
  const auto grads = g.backward(loss);
  s.optimizer.step(s.theta_q, grads.named, r.lr);
  momentum_update(s.theta_k, s.theta_q, cfg.m);
  s.queue.push(keys);
  ++s.step;
  return r;
}
}  // namespace moco_detail

/// One full update: views, keys, loss against the queue, SGD on theta_q,
/// momentum update of theta_k, enqueue. Requires a filled queue.
template <typename T>
StepResult moco_step(MocoState<T>& s, const Tensor<T>& batch, const ContrastConfig& cfg, Rng& rng) {
  return moco_detail::contrast_step(s, batch, cfg, rng, false);
}

/// Training-loop step: like moco_step, but while the queue is filling the
/// loss uses the rows present so far (StepResult::warmup is set).
template <typename T>
StepResult moco_train_step(MocoState<T>& s, const Tensor<T>& batch, const ContrastConfig& cfg, Rng& rng) {
  return moco_detail::contrast_step(s, batch, cfg, rng, true);
}

template <typename T>
void save_moco(Archive& a, const MocoState<T>& s) {
  put_params(a, "theta_q/", s.theta_q);
  put_params(a, "theta_k/", s.theta_k);
  s.queue.save(a);
  s.optimizer.save(a, "optim/");
  a.put_scalar("step", static_cast<double>(s.step));
  a.put_scalar("encoder/width_base", static_cast<double>(s.encoder.width_base));
  a.put_scalar("encoder/embed_dim", static_cast<double>(s.encoder.embed_dim));
}

inline EncoderConfig load_encoder_config(const Archive& a) {
  return EncoderConfig{static_cast<std::size_t>(a.get_scalar("encoder/width_base")),
                       static_cast<std::size_t>(a.get_scalar("encoder/embed_dim"))};
}

template <typename T>
MocoState<T> load_moco(const Archive& a, const ContrastConfig& cfg) {
  MocoState<T> s{load_encoder_config(a), get_params<T>(a, "theta_q/"), get_params<T>(a, "theta_k/"),
                 KeyQueue<T>::load(a), Sgd<T>(cfg.sgd_momentum, cfg.weight_decay),
                 static_cast<std::size_t>(a.get_scalar("step"))};
  s.optimizer.load(a, "optim/");
  return s;
}

}  // namespace dmoco
