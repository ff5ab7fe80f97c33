#pragma once

// Flat key=value run configuration. Blank lines and lines starting with '#'
// are ignored; unknown keys and malformed lines are rejected with the line
// number.

#include <array>
#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmoco/data.hpp"
#include "dmoco/denoiser.hpp"
#include "dmoco/diffusion.hpp"
#include "dmoco/error.hpp"
#include "dmoco/moco.hpp"
#include "dmoco/serialize.hpp"

namespace dmoco {

/// Bad configuration or command-line usage (exit code 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t H = 16;
  // diffusion
  std::size_t T = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t width_base = 16;
  std::size_t time_dim = 32;
  std::size_t ddpm_steps = 2000;
  std::size_t ddpm_batch = 16;
  double ddpm_lr0 = 2e-3;
  std::string sampler_mode = "standard";
  std::string sigma_mode = "beta";
  std::size_t n_samples = 64;
  // contrastive
  double lr0 = 0.03;
  std::size_t total_steps = 2000;
  std::size_t K = 512;
  double m = 0.999;
  double tau = 0.07;
  std::size_t batch = 32;
  std::string loss_mode = "improved";
  std::size_t encoder_width = 16;
  std::size_t embed_dim = 64;
  std::size_t steps_per_epoch = 0;
  // probe
  std::size_t probe_epochs = 30;
  double probe_lr0 = 0.1;
  // data
  std::array<std::size_t, kNumClasses> counts{400, 400, 400, 400};
  double train_frac = 0.8;
  // paths (no defaults)
  std::string data_dir;
  std::string work_dir;

  void validate() const;
  std::string to_text() const;
  SamplerConfig sampler() const { return {parse_sampler_mode(sampler_mode), parse_sigma_mode(sigma_mode)}; }
  ContrastConfig contrast() const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw UsageError("bad value '" + v + "' for " + key);
  return out;
}

template <typename N>
std::string number_text(N v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace config_detail

/// Applies one key=value assignment; throws UsageError for unknown keys or
/// unparsable values.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using config_detail::parse_number;
  auto sz = [&](std::size_t& f) { f = parse_number<std::size_t>(key, value); };
  auto dbl = [&](double& f) { f = parse_number<double>(key, value); };
  if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "H") sz(c.H);
  else if (key == "T") sz(c.T);
  else if (key == "beta_start") dbl(c.beta_start);
  else if (key == "beta_end") dbl(c.beta_end);
  else if (key == "width_base") sz(c.width_base);
  else if (key == "time_dim") sz(c.time_dim);
  else if (key == "ddpm_steps") sz(c.ddpm_steps);
  else if (key == "ddpm_batch") sz(c.ddpm_batch);
  else if (key == "ddpm_lr0") dbl(c.ddpm_lr0);
  else if (key == "sampler_mode") c.sampler_mode = value;
  else if (key == "sigma_mode") c.sigma_mode = value;
  else if (key == "n_samples") sz(c.n_samples);
  else if (key == "lr0") dbl(c.lr0);
  else if (key == "total_steps") sz(c.total_steps);
  else if (key == "K") sz(c.K);
  else if (key == "m") dbl(c.m);
  else if (key == "tau") dbl(c.tau);
  else if (key == "batch") sz(c.batch);
  else if (key == "loss_mode") c.loss_mode = value;
  else if (key == "encoder_width") sz(c.encoder_width);
  else if (key == "embed_dim") sz(c.embed_dim);
  else if (key == "steps_per_epoch") sz(c.steps_per_epoch);
  else if (key == "probe_epochs") sz(c.probe_epochs);
  else if (key == "probe_lr0") dbl(c.probe_lr0);
  else if (key == "train_frac") dbl(c.train_frac);
  else if (key == "data_dir") c.data_dir = value;
  else if (key == "work_dir") c.work_dir = value;
  else if (key == "counts") {
    std::vector<std::size_t> parts;
    std::stringstream ss(value);
    for (std::string item; std::getline(ss, item, ',');) parts.push_back(parse_number<std::size_t>(key, config_detail::trim(item)));
    if (parts.size() == 1) parts.assign(kNumClasses, parts[0]);
    if (parts.size() != kNumClasses) throw UsageError("counts needs 1 or 4 comma-separated values");
    for (std::size_t k = 0; k < kNumClasses; ++k) c.counts[k] = parts[k];
  } else {
    throw UsageError("unknown configuration key '" + key + "'");
  }
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
  RunConfig c;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const auto s = config_detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    const std::string where = source + " line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw UsageError(where + "expected key=value, got '" + s + "'");
    const auto key = config_detail::trim(s.substr(0, eq)), value = config_detail::trim(s.substr(eq + 1));
    if (key.empty()) throw UsageError(where + "empty key");
    try {
      set_config_value(c, key, value);
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    }
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io_detail::read_file(path);
  } catch (const Error& e) {
    throw UsageError(std::string("cannot read config: ") + e.what());
  }
  return parse_config(text, path.string());
}

inline void RunConfig::validate() const {
  try {
    check_resolution(H);
    make_linear_schedule(T, beta_start, beta_end);
    DenoiserConfig{width_base, time_dim, 2, T}.validate();
    EncoderConfig{encoder_width, embed_dim}.validate();
    sampler();
    contrast().validate();
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw ParameterError("train_frac must lie in (0, 1)");
    for (auto n : counts)
      if (n == 0) throw ParameterError("every class count must be positive");
    if (ddpm_steps == 0 || ddpm_batch == 0 || total_steps == 0) throw ParameterError("step and batch counts must be positive");
    if (!(lr0 > 0 && ddpm_lr0 > 0 && probe_lr0 > 0)) throw ParameterError("learning rates must be positive");
  } catch (const ParameterError& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
}

inline ContrastConfig RunConfig::contrast() const {
  ContrastConfig c;
  c.tau = tau;
  c.m = m;
  c.K = K;
  c.batch = batch;
  c.loss_mode = parse_loss_mode(loss_mode);
  c.lr = LrSchedule{lr0, total_steps, steps_per_epoch};
  return c;
}

/// Canonical key=value listing (every key, fixed order).
inline std::string RunConfig::to_text() const {
  using config_detail::number_text;
  std::string counts_text;
  for (std::size_t k = 0; k < kNumClasses; ++k) counts_text += (k ? "," : "") + std::to_string(counts[k]);
  const std::vector<std::pair<std::string, std::string>> kv{
      {"seed", std::to_string(seed)},           {"H", std::to_string(H)},
      {"T", std::to_string(T)},                 {"beta_start", number_text(beta_start)},
      {"beta_end", number_text(beta_end)},      {"width_base", std::to_string(width_base)},
      {"time_dim", std::to_string(time_dim)},   {"ddpm_steps", std::to_string(ddpm_steps)},
      {"ddpm_batch", std::to_string(ddpm_batch)}, {"ddpm_lr0", number_text(ddpm_lr0)},
      {"sampler_mode", sampler_mode},           {"sigma_mode", sigma_mode},
      {"n_samples", std::to_string(n_samples)}, {"lr0", number_text(lr0)},
      {"total_steps", std::to_string(total_steps)}, {"K", std::to_string(K)},
      {"m", number_text(m)},                    {"tau", number_text(tau)},
      {"batch", std::to_string(batch)},         {"loss_mode", loss_mode},
      {"encoder_width", std::to_string(encoder_width)}, {"embed_dim", std::to_string(embed_dim)},
      {"steps_per_epoch", std::to_string(steps_per_epoch)}, {"probe_epochs", std::to_string(probe_epochs)},
      {"probe_lr0", number_text(probe_lr0)},    {"counts", counts_text},
      {"train_frac", number_text(train_frac)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace dmoco
