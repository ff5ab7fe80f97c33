// Acceptance suite: one PASS/FAIL line per criterion. Exit status is
// non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dmoco/grad_check.hpp"
#include "dmoco/pipeline.hpp"
#include "support/op_grad_cases.hpp"

using namespace dmoco;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor<double> unit_rows(Rng& rng, std::size_t n, std::size_t c) {
  auto t = rng.normal_tensor<double>({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < c; ++i) s += t[r * c + i] * t[r * c + i];
    for (std::size_t i = 0; i < c; ++i) t[r * c + i] /= std::sqrt(s);
  }
  return t;
}

double loss_value(LossMode mode, const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& neg,
                  double tau) {
  Graph<double> g;
  return contrastive_loss(mode, g.constant(q), g.constant(k), g.constant(neg), tau).value().item();
}

// ---------------------------------------------------------------- 1

Outcome forward_marginal() {
  const auto t0 = Clock::now();
  const auto sched = make_linear_schedule(100, 1e-4, 0.02);
  const std::size_t N = 100000;
  Rng rng(2024);
  // Every element of the batch is an independent scalar trajectory from x0 = 1.
  const auto xT = forward_iterative(Tensor<double>(Shape{N}, 1.0), 100, rng, sched);
  double mean = 0, var = 0;
  for (double v : xT.data()) mean += v;
  mean /= static_cast<double>(N);
  for (double v : xT.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(N - 1);
  const double ab = sched.a_bar(100);
  const double target_mean = std::sqrt(ab), target_var = 1.0 - ab;
  const double se_mean = std::sqrt(target_var / static_cast<double>(N));
  const double se_var = target_var * std::sqrt(2.0 / static_cast<double>(N - 1));
  const double zm = std::abs(mean - target_mean) / se_mean, zv = std::abs(var - target_var) / se_var;
  const double secs = seconds_since(t0);
  return {zm <= 3 && zv <= 3 && secs < 10,
          "mean=" + num(mean) + " (target " + num(target_mean) + ", z=" + num(zm, 3) + ") var=" + num(var) + " (target " +
              num(target_var) + ", z=" + num(zv, 3) + ") time=" + num(secs, 3) + "s"};
}

// ---------------------------------------------------------------- 2

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const double tol = 1e-4;
  double worst_ops = 0;
  std::size_t op_cases = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (double e : test_support::op_grad_errors(seed)) {
      worst_ops = std::max(worst_ops, e);
      ++op_cases;
    }

  const DenoiserConfig net{4, 8, 2, 20};
  const auto params = init_denoiser<double>(21, net);
  const auto sched = make_linear_schedule(20, 1e-3, 0.2);
  Rng rng(22);
  const auto x0 = rng.normal_tensor<double>({2, 1, 8, 8}, 0.5);
  const auto eps = rng.normal_tensor<double>({2, 1, 8, 8});
  const std::vector<std::size_t> t{4, 15};
  ParamLossFn ddpm = [&](Graph<double>& g, const BoundParams<double>& p) {
    EpsModel<double> model = [&](Graph<double>& gg, const Var<double>& x, std::span<const std::size_t> ts) {
      return denoise_forward(gg, p, x, ts, net);
    };
    return ddpm_loss<double>(g, model, x0, t, eps, sched);
  };
  double worst_ddpm = 0;
  for (const auto& [name, _] : params) worst_ddpm = std::max(worst_ddpm, grad_check_params(ddpm, params, name));

  const EncoderConfig enc{4, 8};
  const auto theta_q = init_encoder<double>(31, enc), theta_k = init_encoder<double>(32, enc);
  const auto views_q = gen_synthetic<double>(DefectClass::scratch, 3, 8, 33);
  const auto keys = key_embeddings(theta_k, gen_synthetic<double>(DefectClass::scratch, 3, 8, 34));
  const auto neg = unit_rows(rng, 6, enc.embed_dim);
  double worst_contrast = 0;
  for (auto mode : {LossMode::original, LossMode::improved}) {
    ParamLossFn f = [&](Graph<double>& g, const BoundParams<double>& p) {
      return query_loss(g, p, views_q, keys, neg, 0.2, mode);
    };
    for (const auto& [name, _] : theta_q) worst_contrast = std::max(worst_contrast, grad_check_params(f, theta_q, name));
  }
  const double secs = seconds_since(t0);
  return {worst_ops <= tol && worst_ddpm <= tol && worst_contrast <= tol && secs < 120,
          "ops=" + num(worst_ops, 3) + " over " + std::to_string(op_cases) + " cases, ddpm_loss=" + num(worst_ddpm, 3) +
              " over " + std::to_string(params.size()) + " tensors, contrastive=" + num(worst_contrast, 3) +
              " time=" + num(secs, 3) + "s"};
}

// ---------------------------------------------------------------- 3

Outcome loss_reductions() {
  Rng rng(3);
  double n1 = 0, same = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = unit_rows(rng, 1, 8), k = unit_rows(rng, 1, 8), neg = unit_rows(rng, 32, 8);
    n1 = std::max(n1, std::abs(loss_value(LossMode::improved, q, k, neg, 0.07) -
                               loss_value(LossMode::original, q, k, neg, 0.07)));
    const auto qs = unit_rows(rng, 6, 8);
    Tensor<double> ks(Shape{6, 8});
    for (std::size_t i = 0; i < ks.size(); ++i) ks[i] = k[i % 8];
    same = std::max(same, std::abs(loss_value(LossMode::improved, qs, ks, neg, 0.2) -
                                   loss_value(LossMode::original, qs, ks, neg, 0.2)));
  }
  // q orthogonal to the positive and to every negative: all logits are 0.
  const std::size_t K = 512;
  Tensor<double> q(Shape{1, 4}), k(Shape{1, 4}), neg(Shape{K, 4});
  q[0] = 1;
  k[1] = 1;
  for (std::size_t r = 0; r < K; ++r) neg[r * 4 + 1 + r % 3] = r % 2 ? 1.0 : -1.0;
  double uniform = 0;
  for (auto mode : {LossMode::original, LossMode::improved})
    uniform = std::max(uniform, std::abs(loss_value(mode, q, k, neg, 0.07) - std::log(static_cast<double>(K + 1))));
  return {n1 <= 1e-12 && same <= 1e-9 && uniform <= 1e-9,
          "n=1 diff=" + num(n1, 3) + " identical-positives diff=" + num(same, 3) + " |L-log(K+1)|=" + num(uniform, 3)};
}

// ---------------------------------------------------------------- 4

Outcome momentum_and_queue() {
  Rng rng(4);
  ParamSet<double> q{{"a", rng.normal_tensor<double>({4, 3})}, {"b", rng.normal_tensor<double>({5})}};
  ParamSet<double> k{{"a", rng.normal_tensor<double>({4, 3})}, {"b", rng.normal_tensor<double>({5})}};
  const auto k0 = k;
  const double m = 0.9;
  for (int s = 0; s < 10; ++s) momentum_update(k, q, m);
  double momentum_err = 0;
  for (const auto& [name, t] : k)
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double expect = q[name][i] + std::pow(m, 10) * (k0.at(name)[i] - q[name][i]);
      momentum_err = std::max(momentum_err, std::abs(t[i] - expect));
    }

  const std::size_t K = 16, c = 4;
  KeyQueue<double> queue(K, c);
  std::deque<std::vector<double>> oracle;
  bool queue_ok = true;
  for (int step = 0; step < 1000 && queue_ok; ++step) {
    const auto n = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(K)));
    const auto keys = unit_rows(rng, n, c);
    queue.push(keys);
    for (std::size_t r = 0; r < n; ++r) {
      oracle.emplace_back(keys.data().begin() + static_cast<std::ptrdiff_t>(r * c),
                          keys.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
      if (oracle.size() > K) oracle.pop_front();
    }
    const auto got = queue.rows_by_age();
    queue_ok = got.size() == oracle.size() && std::equal(got.begin(), got.end(), oracle.begin());
  }
  return {momentum_err <= 1e-9 && queue_ok,
          "momentum max err=" + num(momentum_err, 3) + " queue oracle " + (queue_ok ? "matched" : "MISMATCH") +
              " over 1000 pushes"};
}

// ---------------------------------------------------------------- 5

Outcome sampler_inversion() {
  const auto sched = make_linear_schedule(100, 1e-4, 0.02);
  Rng rng(5);
  const auto x0 = rng.normal_tensor<double>({4, 1, 8, 8}, 0.5);
  const auto eps = rng.normal_tensor<double>({4, 1, 8, 8});
  const auto x1 = forward_closed(x0, 1, eps, sched);
  EpsPredictor<double> oracle = [&](const Tensor<double>&, std::size_t) { return eps; };
  Rng r1(6), r2(6);
  const auto standard = sample_step(x1, 1, oracle, sched, {SamplerMode::standard, SigmaMode::zero}, r1);
  const auto literal = sample_step(x1, 1, oracle, sched, {SamplerMode::literal_eq3, SigmaMode::zero}, r2);
  double inv = 0, agree = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    inv = std::max(inv, std::abs(standard[i] - x0[i]));
    agree = std::max(agree, std::abs(standard[i] - literal[i]));
  }
  return {inv <= 1e-5 && agree <= 1e-9, "recovery err=" + num(inv, 3) + " mode disagreement at t=1=" + num(agree, 3)};
}

// ---------------------------------------------------------------- 6

Outcome ddpm_smoke() {
  using R = float;
  const auto t0 = Clock::now();
  const std::size_t H = 16;
  const auto ds = build_dataset<R>({400, 400, 400, 400}, H, 1, 0.8);
  const auto smooth = gather(ds.images, ds.train_of_class(DefectClass::smooth));
  const auto sched = make_linear_schedule(100, 1e-4, 0.02);
  const DdpmTrainConfig cfg{2000, 16, 2e-3, 0};
  auto state = init_ddpm<R>(7, DenoiserConfig{16, 32, 2, 100});
  std::vector<double> losses;
  train_ddpm(state, smooth, sched, cfg, 7, [&](std::size_t, double loss, double) { losses.push_back(loss); });
  const double early = std::accumulate(losses.begin(), losses.begin() + 100, 0.0) / 100.0;
  const double late = std::accumulate(losses.end() - 100, losses.end(), 0.0) / 100.0;
  const double train_secs = seconds_since(t0);

  const std::size_t n = 128;
  Rng rng(8);
  const auto samples = stack(sample<R>(make_eps_predictor(state.theta, state.net), sched, SamplerConfig{}, n, H, rng));
  auto noise = Rng(9).normal_tensor<R>({n, 1, H, H});
  for (auto& v : noise.data()) v = std::clamp(v, R{-1}, R{1});
  // Fixed, untrained encoder as the feature extractor.
  const auto encoder = init_encoder<R>(10, EncoderConfig{16, 64});
  const auto real = fit_gaussian(extract_features(encoder, gather(ds.images, [&] {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == static_cast<int>(DefectClass::smooth)) idx.push_back(i);
    return idx;
  }())));
  const double fid_samples = frechet_distance(real, fit_gaussian(extract_features(encoder, samples)));
  const double fid_noise = frechet_distance(real, fit_gaussian(extract_features(encoder, noise)));
  const double secs = seconds_since(t0);
  const double ratio = late / early;
  return {ratio <= 0.5 && fid_samples < fid_noise && secs < 15 * 60,
          "loss step-100 avg=" + num(early, 4) + " final avg=" + num(late, 4) + " ratio=" + num(ratio, 3) +
              " FID(samples)=" + num(fid_samples, 4) + " FID(noise)=" + num(fid_noise, 4) +
              " train=" + num(train_secs, 4) + "s total=" + num(secs, 4) + "s"};
}

// ---------------------------------------------------------------- 7

Outcome contrastive_trend() {
  using R = float;
  const auto t0 = Clock::now();
  const auto ds = build_dataset<R>({400, 400, 400, 400}, 16, 1, 0.8);
  std::vector<int> y_train, y_test;
  for (auto i : ds.train) y_train.push_back(ds.labels[i]);
  for (auto i : ds.test) y_test.push_back(ds.labels[i]);
  const auto train_images = gather(ds.images, ds.train), test_images = gather(ds.images, ds.test);
  bool pass = true;
  std::string detail;
  for (auto mode : {LossMode::improved, LossMode::original}) {
    ContrastConfig cfg;
    cfg.loss_mode = mode;
    auto state = init_moco<R>(11, EncoderConfig{16, 64}, cfg);
    train_moco(state, ds.images, ds.train, cfg, 11);
    Rng rng(12);
    const auto probe = train_probe(state.theta_q, train_images, y_train, ProbeConfig{}, rng);
    const auto result = mean_ap(probe.probabilities(extract_features(state.theta_q, test_images)), y_test);
    const double smooth_ap = result.per_class[static_cast<std::size_t>(DefectClass::smooth)];
    const bool smooth_top = std::all_of(result.per_class.begin(), result.per_class.end(),
                                        [&](double ap) { return smooth_ap >= ap; });
    pass = pass && result.map >= 0.85 && smooth_top;
    detail += std::string(loss_mode_name(mode)) + ": mAP=" + num(result.map, 4) + " AP[";
    for (int k = 0; k < kNumClasses; ++k)
      detail += (k ? "," : "") + std::string(class_name(static_cast<DefectClass>(k))) + "=" +
                num(result.per_class[static_cast<std::size_t>(k)], 4);
    detail += "] ";
  }
  const double secs = seconds_since(t0);
  return {pass && secs < 20 * 60, detail + "time=" + num(secs, 4) + "s"};
}

// ---------------------------------------------------------------- 8

double ap_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> at_rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) ahead += scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    at_rank[ahead] = i;
  }
  double sum = 0;
  std::size_t hits = 0, positives = 0;
  for (int l : labels) positives += l != 0;
  for (std::size_t r = 0; r < n; ++r)
    if (labels[at_rank[r]]) sum += static_cast<double>(++hits) / static_cast<double>(r + 1);
  return sum / static_cast<double>(positives);
}

Outcome metric_oracles() {
  Rng rng(13);
  std::size_t ap_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(rng.integer(1, 60));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? rng.uniform() : std::round(rng.uniform() * 8) / 8;
      y[i] = rng.bernoulli(0.3);
    }
    y[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1))] = 1;
    ap_mismatch += average_precision(s, y) != ap_oracle(s, y);
  }

  double fid_err = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double m1 = rng.uniform(-5, 5), m2 = rng.uniform(-5, 5), s1 = rng.uniform(0.01, 4), s2 = rng.uniform(0.01, 4);
    const double got = frechet_distance(FeatureGaussian{{m1}, {s1 * s1}}, FeatureGaussian{{m2}, {s2 * s2}});
    fid_err = std::max(fid_err, std::abs(got - ((m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2))));
  }

  double is_lo = 1e9, is_hi = -1e9;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = static_cast<std::size_t>(rng.integer(1, 40));
    Tensor<double> p(Shape{m, 4});
    for (std::size_t r = 0; r < m; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 4; ++c) sum += p[r * 4 + c] = std::pow(rng.uniform(), 1 + trial % 8);
      for (std::size_t c = 0; c < 4; ++c) p[r * 4 + c] /= sum;
    }
    const double is = inception_style_score(p);
    is_lo = std::min(is_lo, is);
    is_hi = std::max(is_hi, is);
  }
  const Tensor<double> same(Shape{2, 4}, std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4});
  Tensor<double> onehot(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) onehot[i * 4 + i] = 1.0;
  const double is_one = inception_style_score(same), is_four = inception_style_score(onehot);
  const bool boundaries = is_one == 1.0 && is_four == 4.0;
  return {ap_mismatch == 0 && fid_err <= 1e-8 && is_lo >= 1.0 && is_hi <= 4.0 && boundaries,
          "AP mismatches=" + std::to_string(ap_mismatch) + "/1000 FID 1-D max err=" + num(fid_err, 3) + " IS range=[" +
              num(is_lo, 6) + "," + num(is_hi, 6) + "] IS(identical)=" + num(is_one, 17) +
              " IS(one-hot)=" + num(is_four, 17)};
}

// ---------------------------------------------------------------- 9

Outcome schedule_endpoints() {
  bool ok = true;
  std::string detail;
  for (std::size_t total : {2u, 100u, 2000u}) {
    for (double lr0 : {0.03, 1.0, 0.1}) {
      const double a = cosine_lr(0, total, lr0), b = cosine_lr(total / 2, total, lr0), c = cosine_lr(total, total, lr0);
      ok = ok && a == lr0 && b == lr0 / 2 && c == 0.0;
    }
  }
  detail = "lr(0), lr(total/2), lr(total) for lr0=0.03, total=2000: " + num(cosine_lr(0, 2000, 0.03), 17) + ", " +
           num(cosine_lr(1000, 2000, 0.03), 17) + ", " + num(cosine_lr(2000, 2000, 0.03), 17);
  return {ok, detail};
}

// ---------------------------------------------------------------- 10

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      std::ifstream f(e.path(), std::ios::binary);
      std::stringstream ss;
      ss << f.rdbuf();
      files[fs::relative(e.path(), dir).string()] = ss.str();
    }
  return files;
}

void run_pipeline(const RunConfig& c, const fs::path& w) {
  std::ostringstream sink;
  pipeline::gen_data(c, w / "data", sink);
  std::vector<std::string> samples;
  for (int k = 0; k < kNumClasses; ++k) {
    const auto cls = static_cast<DefectClass>(k);
    const auto ck = w / (std::string("ddpm_") + class_name(cls) + ".dft");
    pipeline::train_ddpm(c, w / "data", cls, ck, false, sink);
    samples.push_back((w / (std::string("samples_") + class_name(cls))).string());
    pipeline::sample(c, ck, c.n_samples, samples.back(), sink);
  }
  pipeline::train_moco(c, w / "data", samples, w / "moco.dft", false, sink);
  pipeline::probe(c, w / "data", w / "moco.dft", w / "probe.dft", sink);
  pipeline::eval(c, w / "data", w / "moco.dft", w / "probe.dft", samples, w / "eval", sink);
}

Outcome determinism() {
  const auto t0 = Clock::now();
  RunConfig c;  // defaults, with short training so two full runs fit the budget
  c.seed = 5;
  c.ddpm_steps = 40;
  c.total_steps = 40;
  c.n_samples = 16;
  c.probe_epochs = 5;
  const auto root = fs::temp_directory_path() / "dmoco_acceptance_determinism";
  fs::remove_all(root);
  run_pipeline(c, root / "a");
  run_pipeline(c, root / "b");
  const auto a = tree(root / "a"), b = tree(root / "b");
  std::size_t checkpoints = 0, pgm = 0, csv = 0, differing = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++differing;
    const auto ext = fs::path(name).extension();
    checkpoints += ext == ".dft";
    pgm += ext == ".pgm";
    csv += ext == ".csv";
  }
  differing += b.size() != a.size();
  fs::remove_all(root);
  const double secs = seconds_since(t0);
  return {differing == 0 && checkpoints > 0 && pgm > 0 && csv > 0,
          std::to_string(a.size()) + " files compared (" + std::to_string(checkpoints) + " .dft, " + std::to_string(pgm) +
              " .pgm, " + std::to_string(csv) + " .csv), differing=" + std::to_string(differing) +
              " time=" + num(secs, 4) + "s"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"forward-marginal equivalence", forward_marginal},
      {"gradient suite", gradient_suite},
      {"loss reductions", loss_reductions},
      {"momentum and queue contracts", momentum_and_queue},
      {"sampler inversion", sampler_inversion},
      {"DDPM smoke training", ddpm_smoke},
      {"contrastive pipeline trend", contrastive_trend},
      {"metric oracles", metric_oracles},
      {"schedule endpoints", schedule_endpoints},
      {"determinism", determinism},
  };
  // Optional arguments select criteria by number.
  std::vector<bool> selected(criteria.size(), argc <= 1);
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k >= 1 && k <= static_cast<int>(criteria.size())) selected[static_cast<std::size_t>(k - 1)] = true;
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
