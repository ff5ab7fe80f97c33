#pragma once

// End-to-end commands: dataset generation, per-class denoiser training,
// sampling, contrastive pretraining, linear probing and evaluation. Each
// command writes its artifacts to disk and a short report to `out`.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dmoco/config.hpp"
#include "dmoco/dataset_io.hpp"
#include "dmoco/eval.hpp"
#include "dmoco/training.hpp"

namespace dmoco::pipeline {

namespace fs = std::filesystem;
using Real = float;

namespace detail {

inline constexpr std::uint64_t kSampleStream = 0x5A3Dull << 40;
inline constexpr std::uint64_t kProbeStream = 0x9B0Eull << 40;

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

/// Creates `dir` and checks a file can be written there.
inline void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory '" + dir.string() + "'");
  const auto probe = dir / ".dmoco_write_test";
  {
    std::ofstream f(probe);
    if (!f) throw UsageError("output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

inline void ensure_writable_file(const fs::path& file) {
  ensure_writable_dir(file.has_parent_path() ? file.parent_path() : fs::path("."));
}

inline fs::path require_path(const std::string& given, const std::string& what) {
  if (given.empty()) throw UsageError("no " + what + " given");
  return given;
}

template <typename T>
LabeledDataset<T> load_dataset(const fs::path& dir, double train_frac) {
  if (!fs::is_directory(dir)) throw UsageError("dataset directory '" + dir.string() + "' does not exist");
  try {
    return read_dataset_dir<T>(dir, train_frac);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

inline Archive load_archive(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " '" + path.string() + "' does not exist");
  return Archive::load(path);
}

/// Line-oriented step,loss,lr log mirrored to `out` and a file.
class CsvLog {
 public:
  CsvLog(const fs::path& path, bool append, std::ostream& out) : out_(out) {
    const bool fresh = !append || !fs::exists(path);
    file_.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!file_) throw UsageError("cannot write log '" + path.string() + "'");
    if (fresh) file_ << "step,loss,lr\n";
    out_ << "step,loss,lr\n";
  }
  void operator()(std::size_t step, double loss, double lr) {
    const std::string line = std::to_string(step) + "," + fmt(loss, 8) + "," + fmt(lr, 8) + "\n";
    file_ << line;
    out_ << line;
  }

 private:
  std::ofstream file_;
  std::ostream& out_;
};

/// Images of every samples.dft found in `dirs`, stacked.
inline std::vector<Tensor<Real>> load_sample_images(const std::vector<std::string>& dirs, std::size_t H) {
  std::vector<Tensor<Real>> out;
  for (const auto& d : dirs) {
    const auto batch = [&] {
      const fs::path p = fs::path(d) / "samples.dft";
      if (!fs::is_regular_file(p)) throw UsageError("no samples.dft in '" + d + "'");
      return load_dft<Real>(p);
    }();
    if (batch.rank() != 4 || batch.dim(2) != H || batch.dim(3) != H)
      throw UsageError("samples in '" + d + "' do not match the configured resolution");
    for (std::size_t i = 0; i < batch.dim(0); ++i) out.push_back(image_at(batch, i));
  }
  return out;
}

inline DenoiserConfig denoiser_config(const RunConfig& c) { return DenoiserConfig{c.width_base, c.time_dim, 2, c.T}; }
inline EncoderConfig encoder_config(const RunConfig& c) { return EncoderConfig{c.encoder_width, c.embed_dim}; }

}  // namespace detail

// ---------------------------------------------------------------- gen-data

inline void gen_data(const RunConfig& c, const fs::path& out_dir, std::ostream& out) {
  c.validate();
  detail::ensure_writable_dir(out_dir);
  const auto ds = build_dataset<double>(c.counts, c.H, c.seed, c.train_frac);
  write_dataset_dir(out_dir, ds);
  std::array<std::size_t, kNumClasses> n{};
  for (int l : ds.labels) ++n[static_cast<std::size_t>(l)];
  for (int k = 0; k < kNumClasses; ++k)
    out << class_name(static_cast<DefectClass>(k)) << "=" << n[static_cast<std::size_t>(k)] << "\n";
  out << "train=" << ds.train.size() << " test=" << ds.test.size() << "\n";
}

// ---------------------------------------------------------------- train-ddpm

/// Trains the denoiser for one class on its training images. With `resume`
/// an existing checkpoint at `ckpt` is continued from its saved step;
/// `stop_at` ends the run early without changing the LR schedule.
inline void train_ddpm(const RunConfig& c, const fs::path& data_dir, DefectClass cls, const fs::path& ckpt,
                       bool resume, std::ostream& out, std::size_t stop_at = SIZE_MAX) {
  c.validate();
  const auto ds = detail::load_dataset<Real>(data_dir, c.train_frac);
  if (ds.resolution() != c.H) throw UsageError("dataset resolution differs from configured H");
  detail::ensure_writable_file(ckpt);
  const auto images = gather(ds.images, ds.train_of_class(cls));
  const auto sched = make_linear_schedule(c.T, c.beta_start, c.beta_end);
  const DdpmTrainConfig tc{c.ddpm_steps, c.ddpm_batch, c.ddpm_lr0, c.steps_per_epoch};
  const bool continuing = resume && fs::exists(ckpt);
  auto state = continuing ? load_ddpm<Real>(Archive::load(ckpt)) : init_ddpm<Real>(c.seed, detail::denoiser_config(c));
  if (continuing && state.net.width_base != c.width_base) throw UsageError("checkpoint network differs from config");
  // Each class gets its own stream so the four models are not trained on
  // identical noise.
  const std::uint64_t seed = c.seed * kNumClasses + static_cast<std::uint64_t>(cls);
  out << "class=" << class_name(cls) << " images=" << images.dim(0) << " start_step=" << state.step << "\n";
  detail::CsvLog log(ckpt.string() + ".log.csv", continuing, out);
  dmoco::train_ddpm(state, images, sched, tc, seed, std::ref(log), stop_at);
  ddpm_checkpoint(state, sched).save(ckpt, "class=" + std::string(class_name(cls)) + "\n" + c.to_text());
}

// ---------------------------------------------------------------- sample

struct SampleReport {
  SampleStats stats;
  bool finite = true;
};

/// Draws n images from a denoiser checkpoint into `out_dir` as PGMs plus a
/// samples.dft batch.
inline SampleReport sample(const RunConfig& c, const fs::path& ckpt, std::size_t n, const fs::path& out_dir,
                           std::ostream& out) {
  c.validate();
  const auto a = detail::load_archive(ckpt, "checkpoint");
  const auto state = load_ddpm<Real>(a);
  const auto sched = NoiseSchedule::load(a);
  detail::ensure_writable_dir(out_dir);
  const auto cfg = c.sampler();
  Rng rng = Rng::derived(c.seed, detail::kSampleStream);
  SampleReport r;
  auto images = dmoco::sample<Real>(make_eps_predictor(state.theta, state.net), sched, cfg, n, c.H, rng, &r.stats);
  for (auto& img : images)
    for (auto& v : img.data())
      if (!std::isfinite(v)) {
        r.finite = false;
        v = 0;  // keep the files valid; divergence is reported below
      }
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << i << ".pgm";
    save_pgm(out_dir / name.str(), images[i]);
  }
  if (!images.empty()) save_dft(out_dir / "samples.dft", stack(images));
  const bool diverged = !r.finite || r.stats.clamped_fraction > 0.5;
  out << "sampler=" << c.sampler_mode << " sigma=" << c.sigma_mode << " n=" << images.size()
      << " max_abs=" << detail::fmt(r.stats.max_abs) << " clamped_fraction=" << detail::fmt(r.stats.clamped_fraction)
      << " finite=" << (r.finite ? "yes" : "no") << " diverged=" << (diverged ? "yes" : "no") << "\n";
  return r;
}

// ---------------------------------------------------------------- train-moco

/// Contrastive pretraining on the training split plus any generated samples
/// found in `sample_dirs`.
inline void train_moco(const RunConfig& c, const fs::path& data_dir, const std::vector<std::string>& sample_dirs,
                       const fs::path& ckpt, bool resume, std::ostream& out, std::size_t stop_at = SIZE_MAX) {
  c.validate();
  const auto ds = detail::load_dataset<Real>(data_dir, c.train_frac);
  if (ds.resolution() != c.H) throw UsageError("dataset resolution differs from configured H");
  detail::ensure_writable_file(ckpt);
  const auto extra = detail::load_sample_images(sample_dirs, c.H);
  Tensor<Real> images = ds.images;
  std::vector<std::size_t> pool = ds.train;
  if (!extra.empty()) {
    std::vector<Tensor<Real>> all;
    for (std::size_t i = 0; i < ds.size(); ++i) all.push_back(image_at(ds.images, i));
    for (const auto& img : extra) {
      pool.push_back(all.size());
      all.push_back(img);
    }
    images = stack(all);
  }
  const auto cc = c.contrast();
  const bool continuing = resume && fs::exists(ckpt);
  auto state = continuing ? load_moco<Real>(Archive::load(ckpt), cc)
                          : init_moco<Real>(c.seed, detail::encoder_config(c), cc);
  out << "loss=" << loss_mode_name(cc.loss_mode) << " pool=" << pool.size() << " generated=" << extra.size()
      << " start_step=" << state.step << "\n";
  detail::CsvLog log(ckpt.string() + ".log.csv", continuing, out);
  dmoco::train_moco(state, images, pool, cc, c.seed, std::ref(log), stop_at);
  Archive a;
  save_moco(a, state);
  a.save(ckpt, c.to_text());
}

// ---------------------------------------------------------------- probe

inline ProbeConfig probe_config(const RunConfig& c) {
  ProbeConfig p;
  p.epochs = c.probe_epochs;
  p.batch = c.batch;
  p.lr0 = c.probe_lr0;
  return p;
}

inline ParamSet<Real> load_encoder(const fs::path& ckpt) {
  const auto a = detail::load_archive(ckpt, "encoder checkpoint");
  auto theta = get_params<Real>(a, "theta_q/");
  if (theta.empty()) throw FormatError("checkpoint has no query encoder", 0);
  return theta;
}

/// Trains a linear probe on frozen encoder features of the training split
/// and reports test accuracy and mAP.
inline void probe(const RunConfig& c, const fs::path& data_dir, const fs::path& encoder_ckpt, const fs::path& out_file,
                  std::ostream& out) {
  c.validate();
  const auto ds = detail::load_dataset<Real>(data_dir, c.train_frac);
  const auto encoder = load_encoder(encoder_ckpt);
  detail::ensure_writable_file(out_file);
  auto labels_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<int> y;
    for (auto i : idx) y.push_back(ds.labels[i]);
    return y;
  };
  Rng rng = Rng::derived(c.seed, detail::kProbeStream);
  const auto p = train_probe(encoder, gather(ds.images, ds.train), labels_of(ds.train), probe_config(c), rng);
  Archive a;
  p.save(a);
  a.save(out_file, c.to_text());
  const auto test_features = extract_features(encoder, gather(ds.images, ds.test));
  const auto y = labels_of(ds.test);
  out << "accuracy=" << detail::fmt(accuracy(p.predict(test_features), y))
      << " map=" << detail::fmt(mean_ap(p.probabilities(test_features), y).map) << "\n";
}

// ---------------------------------------------------------------- eval

struct EvalReport {
  MeanAp map;
  double accuracy = 0;
  double fid = 0;
  double is = 0;
  std::string fid_source;
};

/// Scores the probe on the test split: one PR curve per class, a metrics
/// table and a summary. FID and IS are measured on the generated samples
/// when given, otherwise on the real test images.
inline EvalReport eval(const RunConfig& c, const fs::path& data_dir, const fs::path& encoder_ckpt,
                       const fs::path& probe_ckpt, const std::vector<std::string>& sample_dirs, const fs::path& out_dir,
                       std::ostream& out) {
  c.validate();
  const auto ds = detail::load_dataset<Real>(data_dir, c.train_frac);
  const auto encoder = load_encoder(encoder_ckpt);
  const auto probe = LinearProbe<Real>::load(detail::load_archive(probe_ckpt, "probe checkpoint"));
  detail::ensure_writable_dir(out_dir);

  std::vector<int> y;
  for (auto i : ds.test) y.push_back(ds.labels[i]);
  const auto features = extract_features(encoder, gather(ds.images, ds.test));
  const auto probs = probe.probabilities(features);
  const auto preds = probe.predict(features);

  EvalReport r;
  r.accuracy = accuracy(preds, y);
  r.map = mean_ap(probs, y);
  std::string metrics = "class,precision,recall,ap\n";
  for (int k = 0; k < kNumClasses; ++k) {
    std::vector<double> s(y.size());
    std::vector<int> pos(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      s[i] = static_cast<double>(probs[i * kNumClasses + static_cast<std::size_t>(k)]);
      pos[i] = y[i] == k;
    }
    const auto curve = pr_curve(s, pos);
    std::string csv = "threshold,precision,recall\n";
    for (std::size_t j = 0; j < curve.thresholds.size(); ++j)
      csv += detail::fmt(curve.thresholds[j], 8) + "," + detail::fmt(curve.precision[j], 8) + "," +
             detail::fmt(curve.recall[j], 8) + "\n";
    io_detail::write_file(out_dir / ("pr_class_" + std::to_string(k) + ".csv"), csv);
    const auto [prec, rec] = precision_recall(preds, y, k);
    metrics += std::string(class_name(static_cast<DefectClass>(k))) + "," + detail::fmt(prec) + "," + detail::fmt(rec) +
               "," + detail::fmt(curve.ap) + "\n";
  }
  io_detail::write_file(out_dir / "metrics.csv", metrics);

  std::vector<std::size_t> train_idx = ds.train;
  const auto real = fit_gaussian(extract_features(encoder, gather(ds.images, train_idx)));
  const auto generated = detail::load_sample_images(sample_dirs, ds.resolution());
  if (!generated.empty()) {
    if (generated.size() < 2) throw UsageError("FID needs at least two generated images");
    const auto gen_features = extract_features(encoder, stack(generated));
    r.fid = frechet_distance(real, fit_gaussian(gen_features));
    r.is = inception_style_score(probe.probabilities(gen_features));
    r.fid_source = "generated";
  } else {
    r.fid = frechet_distance(real, fit_gaussian(features));
    r.is = inception_style_score(probs);
    r.fid_source = "real_test";
  }
  std::string summary = "map=" + detail::fmt(r.map.map) + "\n" + "accuracy=" + detail::fmt(r.accuracy) + "\n" +
                        "fid=" + detail::fmt(r.fid) + "\n" + "is=" + detail::fmt(r.is) + "\n" +
                        "fid_source=" + r.fid_source + "\n";
  for (int k = 0; k < kNumClasses; ++k)
    summary += std::string("ap_") + class_name(static_cast<DefectClass>(k)) + "=" +
               detail::fmt(r.map.per_class[static_cast<std::size_t>(k)]) + "\n";
  io_detail::write_file(out_dir / "summary.txt", summary);
  out << summary;
  return r;
}

}  // namespace dmoco::pipeline
