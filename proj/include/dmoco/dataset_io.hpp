#pragma once

// Binary PGM (P5, maxval 255) images and the on-disk dataset layout:
//
//   <dir>/class_<k>/img_<i>.pgm   i counts within class k, in dataset order
//   <dir>/labels.csv              "path,class" rows, dataset order
//   <dir>/dataset.dft             archive: images, labels, train, test
//
// The archive is the exact copy; PGMs are the 8-bit interchange view.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmoco/data.hpp"
#include "dmoco/serialize.hpp"

namespace dmoco {

/// Writes the last two axes of `img` (values in [-1, 1]) as an 8-bit P5 PGM.
template <typename T>
std::string encode_pgm(const Tensor<T>& img) {
  if (img.rank() < 2 || img.size() != img.shape()[img.rank() - 2] * img.shape().back())
    throw ShapeError("PGM needs a single-plane image, got " + to_string(img.shape()));
  const std::size_t H = img.shape()[img.rank() - 2], W = img.shape().back();
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (T v : img.data()) {
    const double q = std::round((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  return out;
}

/// Parses a P5 PGM into (1, H, W) in [-1, 1].
template <typename T>
Tensor<T> decode_pgm(std::string_view in) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < in.size()) {
      if (in[pos] == '#') {
        while (pos < in.size() && in[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(in[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < in.size() && std::isdigit(static_cast<unsigned char>(in[pos])) && pos - start < 9)
      v = v * 10 + static_cast<std::size_t>(in[pos++] - '0');
    if (pos == start) throw FormatError(std::string("expected PGM ") + what, start);
    return v;
  };
  if (in.size() < 2 || in.substr(0, 2) != "P5") throw FormatError("not a binary PGM (missing P5)", 0);
  pos = 2;
  const std::size_t W = number("width"), H = number("height"), maxval = number("maxval");
  if (W == 0 || H == 0) throw FormatError("PGM extents must be positive", pos);
  if (maxval != 255) throw FormatError("PGM maxval must be 255", pos);
  if (pos >= in.size() || !std::isspace(static_cast<unsigned char>(in[pos])))
    throw FormatError("missing whitespace after PGM header", pos);
  ++pos;
  if (in.size() - pos < W * H) throw FormatError("truncated PGM raster", in.size());
  Tensor<T> out(Shape{1, H, W});
  for (std::size_t i = 0; i < W * H; ++i)
    out[i] = static_cast<T>(static_cast<double>(static_cast<unsigned char>(in[pos + i])) / 127.5 - 1.0);
  return out;
}

template <typename T>
void save_pgm(const std::filesystem::path& path, const Tensor<T>& img) {
  io_detail::write_file(path, encode_pgm(img));
}

template <typename T>
Tensor<T> load_pgm(const std::filesystem::path& path) {
  return decode_pgm<T>(io_detail::read_file(path));
}

template <typename T>
Archive dataset_archive(const LabeledDataset<T>& ds) {
  auto as_tensor = [](const auto& v) {
    std::vector<double> d(v.begin(), v.end());
    if (d.empty()) d.push_back(-1.0);  // extents must be positive; -1 marks an empty list
    const Shape shape{d.size()};
    return Tensor<double>(shape, std::move(d));
  };
  Archive a;
  a.put("images", ds.images);
  a.put("labels", as_tensor(ds.labels));
  a.put("train", as_tensor(ds.train));
  a.put("test", as_tensor(ds.test));
  return a;
}

template <typename T>
void write_dataset_dir(const std::filesystem::path& dir, const LabeledDataset<T>& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::array<std::size_t, kNumClasses> seen{};
  std::string csv = "path,class\n";
  for (int k = 0; k < kNumClasses; ++k) fs::create_directories(dir / ("class_" + std::to_string(k)));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto k = static_cast<std::size_t>(ds.labels[i]);
    const std::string rel = "class_" + std::to_string(k) + "/img_" + std::to_string(seen[k]++) + ".pgm";
    save_pgm(dir / rel, image_at(ds.images, i));
    csv += rel + "," + std::to_string(k) + "\n";
  }
  io_detail::write_file(dir / "labels.csv", csv);
  dataset_archive(ds).save(dir / "dataset.dft");
}

/// Loads dataset.dft when present; otherwise the PGMs listed in labels.csv
/// with a fresh stratified split at `train_frac`.
template <typename T>
LabeledDataset<T> read_dataset_dir(const std::filesystem::path& dir, double train_frac = 0.8) {
  namespace fs = std::filesystem;
  LabeledDataset<T> ds;
  auto as_indices = [](const Tensor<double>& t) {
    std::vector<std::size_t> out;
    for (double v : t.data())
      if (v >= 0) out.push_back(static_cast<std::size_t>(v));
    return out;
  };
  if (fs::exists(dir / "dataset.dft")) {
    const auto a = Archive::load(dir / "dataset.dft");
    ds.images = a.get<T>("images");
    const auto labels = a.get<double>("labels");
    for (double v : labels.data()) ds.labels.push_back(static_cast<int>(v));
    ds.train = as_indices(a.get<double>("train"));
    ds.test = as_indices(a.get<double>("test"));
    if (ds.images.rank() != 4 || ds.images.dim(0) != ds.labels.size())
      throw FormatError("dataset archive images and labels disagree", 0);
    return ds;
  }
  if (!fs::exists(dir / "labels.csv")) throw Error("no dataset found in '" + dir.string() + "'");
  std::istringstream csv(io_detail::read_file(dir / "labels.csv"));
  std::string line;
  std::getline(csv, line);
  std::vector<Tensor<T>> images;
  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError("labels.csv line " + std::to_string(lineno) + " has no comma", 0);
    const int k = std::stoi(line.substr(comma + 1));
    if (k < 0 || k >= kNumClasses) throw FormatError("labels.csv line " + std::to_string(lineno) + ": bad class", 0);
    images.push_back(load_pgm<T>(dir / line.substr(0, comma)));
    ds.labels.push_back(k);
  }
  ds.images = stack(images);
  stratified_split(ds, train_frac);
  return ds;
}

}  // namespace dmoco
