#pragma once

// Synthetic four-class surface-defect images, the classical augmentations
// used to build contrastive views, and stratified dataset splitting.
//
// Images live in [-1, 1] with shape (1, H, H); batches are (n, 1, H, H).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dmoco/error.hpp"
#include "dmoco/tensor.hpp"

namespace dmoco {

enum class DefectClass : int { corrosion = 0, dent = 1, scratch = 2, smooth = 3 };

inline constexpr int kNumClasses = 4;

inline const char* class_name(DefectClass c) {
  switch (c) {
    case DefectClass::corrosion: return "corrosion";
    case DefectClass::dent: return "dent";
    case DefectClass::scratch: return "scratch";
    case DefectClass::smooth: return "smooth";
  }
  return "?";
}

inline DefectClass parse_class(const std::string& s) {
  for (int k = 0; k < kNumClasses; ++k)
    if (s == class_name(static_cast<DefectClass>(k)) || s == std::to_string(k)) return static_cast<DefectClass>(k);
  throw ParameterError("unknown defect class '" + s + "'");
}

inline void check_resolution(std::size_t H) {
  if (H != 8 && H != 16 && H != 32) throw ParameterError("image size must be 8, 16 or 32, got " + std::to_string(H));
}

namespace data_detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double u = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  const double qx = ax + u * dx - px, qy = ay + u * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

template <typename T>
void render(DefectClass cls, std::size_t H, Rng& rng, T* img) {
  std::vector<double> v(H * H);
  const double base = rng.uniform(-0.05, 0.05);
  for (auto& p : v) p = base + 0.02 * rng.normal();
  const double h = static_cast<double>(H);

  switch (cls) {
    case DefectClass::smooth:
      break;
    case DefectClass::dent: {
      const auto count = rng.integer(1, 3);
      for (std::int64_t d = 0; d < count; ++d) {
        const double cx = rng.uniform(0.2 * h, 0.8 * h), cy = rng.uniform(0.2 * h, 0.8 * h);
        const double width = rng.uniform(0.08 * h, 0.2 * h), depth = rng.uniform(0.4, 0.8);
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < H; ++x) {
            const double r2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
            v[y * H + x] -= depth * std::exp(-r2 / (2.0 * width * width));
          }
      }
      break;
    }
    case DefectClass::scratch: {
      const auto count = rng.integer(1, 2);
      for (std::int64_t s = 0; s < count; ++s) {
        const double angle = rng.uniform(0.0, 3.14159265358979323846);
        const double length = rng.uniform(0.5 * h, 0.9 * h);
        const double cx = rng.uniform(0.3 * h, 0.7 * h), cy = rng.uniform(0.3 * h, 0.7 * h);
        const double depth = rng.uniform(0.5, 0.9);
        const double ax = cx - 0.5 * length * std::cos(angle), ay = cy - 0.5 * length * std::sin(angle);
        const double bx = cx + 0.5 * length * std::cos(angle), by = cy + 0.5 * length * std::sin(angle);
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < H; ++x) {
            // Coverage falls off linearly over one pixel around the centre line.
            const double d = segment_distance(x + 0.5, y + 0.5, ax, ay, bx, by);
            v[y * H + x] -= depth * std::max(0.0, 1.0 - d);
          }
      }
      break;
    }
    case DefectClass::corrosion: {
      const double density = rng.uniform(0.02, 0.06);
      for (auto& p : v)
        if (rng.bernoulli(density)) p += (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.4, 0.8);
      break;
    }
  }
  for (std::size_t i = 0; i < H * H; ++i) img[i] = static_cast<T>(std::clamp(v[i], -1.0, 1.0));
}

}  // namespace data_detail

/// `count` images of one class, (count, 1, H, H). Image i is drawn from a
/// stream derived from (seed, class, i), so batches are reproducible and
/// prefixes agree across counts.
template <typename T>
Tensor<T> gen_synthetic(DefectClass cls, std::size_t count, std::size_t H, std::uint64_t seed) {
  check_resolution(H);
  if (count == 0) throw ParameterError("gen_synthetic: count must be positive");
  Tensor<T> out(Shape{count, 1, H, H});
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::derived(seed, (static_cast<std::uint64_t>(cls) << 32) | i);
    data_detail::render(cls, H, rng, out.data().data() + i * H * H);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentations on (..., H, W)

template <typename T>
Tensor<T> augment_flip(const Tensor<T>& img) {
  const std::size_t W = img.shape().back(), rows = img.size() / W;
  Tensor<T> out(img.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t x = 0; x < W; ++x) out[r * W + x] = img[r * W + (W - 1 - x)];
  return out;
}

/// Replicates border pixels by `pad`, then crops H x W starting at
/// (dy, dx) in padded coordinates, each in [0, 2 * pad].
template <typename T>
Tensor<T> augment_pad_crop(const Tensor<T>& img, std::size_t pad, std::size_t dy, std::size_t dx) {
  if (img.rank() < 2) throw ShapeError("augment_pad_crop expects (..., H, W)");
  if (dy > 2 * pad || dx > 2 * pad) throw ParameterError("crop offset exceeds padding");
  const std::size_t H = img.shape()[img.rank() - 2], W = img.shape().back(), planes = img.size() / (H * W);
  Tensor<T> out(img.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const auto sy = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad),
                                                   0, static_cast<std::ptrdiff_t>(H) - 1);
        const auto sx = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad),
                                                   0, static_cast<std::ptrdiff_t>(W) - 1);
        out[(p * H + y) * W + x] = img[(p * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
      }
  return out;
}

/// Edge padding followed by a centre crop back to H x W.
template <typename T>
Tensor<T> augment_edge_pad(const Tensor<T>& img, std::size_t pad) {
  return augment_pad_crop(img, pad, pad, pad);
}

/// x -> clamp(mean + factor * (x - mean), -1, 1) with the mean over the image.
template <typename T>
Tensor<T> augment_contrast(const Tensor<T>& img, double factor) {
  if (!(factor > 0.0)) throw ParameterError("contrast factor must be positive");
  double mean = 0.0;
  for (T v : img.data()) mean += v;
  mean /= static_cast<double>(img.size());
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<T>(std::clamp(img[i] + (factor - 1.0) * (img[i] - mean), -1.0, 1.0));
  return out;
}

struct ViewAugment {
  std::size_t pad = 4;
  double contrast_lo = 0.7;
  double contrast_hi = 1.3;
};

/// One random contrastive view: flip with probability 1/2, random contrast,
/// random edge-pad-then-crop.
template <typename T>
Tensor<T> random_view(const Tensor<T>& img, Rng& rng, const ViewAugment& aug = {}) {
  Tensor<T> v = rng.bernoulli(0.5) ? augment_flip(img) : img;
  v = augment_contrast(v, rng.uniform(aug.contrast_lo, aug.contrast_hi));
  const auto span = static_cast<std::int64_t>(2 * aug.pad);
  const auto dy = static_cast<std::size_t>(rng.integer(0, span));
  const auto dx = static_cast<std::size_t>(rng.integer(0, span));
  return augment_pad_crop(v, aug.pad, dy, dx);
}

// ---------------------------------------------------------------------------
// Batches and datasets

/// Image `i` of a batch (n, C, H, W) as (C, H, W).
template <typename T>
Tensor<T> image_at(const Tensor<T>& batch, std::size_t i) {
  const std::size_t per = batch.size() / batch.dim(0);
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  return Tensor<T>(s, std::vector<T>(batch.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                     batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
}

/// Stacks equally shaped images into a batch.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw ShapeError("cannot stack zero images");
  Shape s{images.size()};
  s.insert(s.end(), images[0].shape().begin(), images[0].shape().end());
  std::vector<T> data;
  data.reserve(numel(s));
  for (const auto& im : images) {
    if (im.shape() != images[0].shape()) throw ShapeError("stack: mismatched image shapes");
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor<T>(std::move(s), std::move(data));
}

template <typename T>
Tensor<T> gather(const Tensor<T>& batch, const std::vector<std::size_t>& idx) {
  std::vector<Tensor<T>> images;
  images.reserve(idx.size());
  for (auto i : idx) images.push_back(image_at(batch, i));
  return stack(images);
}

template <typename T>
struct LabeledDataset {
  Tensor<T> images;  // (n, 1, H, H)
  std::vector<int> labels;
  std::vector<std::size_t> train, test;

  std::size_t size() const { return labels.size(); }
  std::size_t resolution() const { return images.dim(2); }

  std::vector<std::size_t> train_of_class(DefectClass c) const {
    std::vector<std::size_t> out;
    for (auto i : train)
      if (labels[i] == static_cast<int>(c)) out.push_back(i);
    return out;
  }
};

/// Per-class stratified split: within each class the first
/// round(train_frac * count) items (in dataset order) go to train.
template <typename T>
void stratified_split(LabeledDataset<T>& ds, double train_frac) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ParameterError("train_frac must lie in (0, 1)");
  std::array<std::size_t, kNumClasses> total{}, taken{};
  for (int l : ds.labels) ++total.at(static_cast<std::size_t>(l));
  ds.train.clear();
  ds.test.clear();
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    const auto quota = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(total[c])));
    (taken[c]++ < quota ? ds.train : ds.test).push_back(i);
  }
}

/// Generates every class, shuffles with the seed and splits per class.
template <typename T>
LabeledDataset<T> build_dataset(const std::array<std::size_t, kNumClasses>& counts, std::size_t H,
                                std::uint64_t seed, double train_frac = 0.8) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ParameterError("train_frac must lie in (0, 1)");
  check_resolution(H);
  std::vector<Tensor<T>> images;
  std::vector<int> labels;
  for (int k = 0; k < kNumClasses; ++k) {
    if (counts[static_cast<std::size_t>(k)] < 1) throw ParameterError("every class needs at least one image");
    auto batch = gen_synthetic<T>(static_cast<DefectClass>(k), counts[static_cast<std::size_t>(k)], H, seed);
    for (std::size_t i = 0; i < batch.dim(0); ++i) {
      images.push_back(image_at(batch, i));
      labels.push_back(k);
    }
  }
  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::derived(seed, 0xD5A7u);
  rng.shuffle(order);
  LabeledDataset<T> ds;
  std::vector<Tensor<T>> shuffled;
  for (auto i : order) {
    shuffled.push_back(std::move(images[i]));
    ds.labels.push_back(labels[i]);
  }
  ds.images = stack(shuffled);
  stratified_split(ds, train_frac);
  return ds;
}

}  // namespace dmoco
