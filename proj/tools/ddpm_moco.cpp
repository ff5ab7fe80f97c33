// Command-line front end for the generate-then-contrast pipeline.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "dmoco/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dmoco;

namespace {

struct Common {
  std::string config, out, data, checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file");
  cmd->add_option("--seed", c.seed, "override the configured seed");
  cmd->add_option("--out", c.out, "output path");
  cmd->add_option("--set", c.overrides, "extra key=value override (repeatable)");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path output_path(const Common& c, const RunConfig& cfg, const std::string& default_name) {
  if (!c.out.empty()) return c.out;
  if (cfg.work_dir.empty()) throw UsageError("no --out given and work_dir is not configured");
  return fs::path(cfg.work_dir) / default_name;
}

fs::path data_path(const Common& c, const RunConfig& cfg) {
  if (!c.data.empty()) return c.data;
  if (cfg.data_dir.empty()) throw UsageError("no --data given and data_dir is not configured");
  return cfg.data_dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-augmented contrastive learning for surface-defect images"};
  app.require_subcommand(1);

  Common gen, ddpm, smp, moco, prb, ev;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic labelled dataset");
  add_common(gen_cmd, gen);

  auto* ddpm_cmd = app.add_subcommand("train-ddpm", "train the denoiser of one class");
  add_common(ddpm_cmd, ddpm);
  std::string cls_name;
  bool resume = false;
  ddpm_cmd->add_option("--data", ddpm.data, "dataset directory");
  ddpm_cmd->add_option("--class", cls_name, "defect class (name or code)")->required();
  ddpm_cmd->add_flag("--resume", resume, "continue from the checkpoint at --out");
  std::size_t ddpm_stop = SIZE_MAX;
  ddpm_cmd->add_option("--stop-at", ddpm_stop, "stop after this step (schedule unchanged)");

  auto* smp_cmd = app.add_subcommand("sample", "draw images from a denoiser checkpoint");
  add_common(smp_cmd, smp);
  std::optional<std::size_t> n_samples;
  std::string sampler, sigma;
  smp_cmd->add_option("--checkpoint", smp.checkpoint, "denoiser checkpoint")->required();
  smp_cmd->add_option("-n,--count", n_samples, "number of images");
  smp_cmd->add_option("--sampler", sampler, "standard or literal_eq3");
  smp_cmd->add_option("--sigma", sigma, "beta or zero");

  auto* moco_cmd = app.add_subcommand("train-moco", "contrastive pretraining of the encoder");
  add_common(moco_cmd, moco);
  std::string loss;
  std::vector<std::string> moco_samples;
  bool moco_resume = false;
  moco_cmd->add_option("--data", moco.data, "dataset directory");
  moco_cmd->add_option("--samples", moco_samples, "directories of generated samples to add");
  moco_cmd->add_option("--loss", loss, "improved or original");
  moco_cmd->add_flag("--resume", moco_resume, "continue from the checkpoint at --out");
  std::size_t moco_stop = SIZE_MAX;
  moco_cmd->add_option("--stop-at", moco_stop, "stop after this step (schedule unchanged)");

  auto* prb_cmd = app.add_subcommand("probe", "train a linear probe on frozen features");
  add_common(prb_cmd, prb);
  prb_cmd->add_option("--data", prb.data, "dataset directory");
  prb_cmd->add_option("--checkpoint", prb.checkpoint, "encoder checkpoint")->required();

  auto* ev_cmd = app.add_subcommand("eval", "PR curves, AP, mAP, FID and IS");
  add_common(ev_cmd, ev);
  std::string probe_ckpt;
  std::vector<std::string> ev_samples;
  ev_cmd->add_option("--data", ev.data, "dataset directory");
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "encoder checkpoint")->required();
  ev_cmd->add_option("--probe", probe_ckpt, "probe checkpoint")->required();
  ev_cmd->add_option("--samples", ev_samples, "directories of generated samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) {
      const auto cfg = resolve_config(gen);
      pipeline::gen_data(cfg, output_path(gen, cfg, "data"), std::cout);
    } else if (*ddpm_cmd) {
      const auto cfg = resolve_config(ddpm);
      DefectClass cls;
      try {
        cls = parse_class(cls_name);
      } catch (const ParameterError& e) {
        throw UsageError(e.what());
      }
      pipeline::train_ddpm(cfg, data_path(ddpm, cfg), cls, output_path(ddpm, cfg, std::string("ddpm_") + class_name(cls) + ".dft"),
                           resume, std::cout, ddpm_stop);
    } else if (*smp_cmd) {
      auto cfg = resolve_config(smp);
      if (!sampler.empty()) cfg.sampler_mode = sampler;
      if (!sigma.empty()) cfg.sigma_mode = sigma;
      pipeline::sample(cfg, smp.checkpoint, n_samples.value_or(cfg.n_samples), output_path(smp, cfg, "samples"),
                       std::cout);
    } else if (*moco_cmd) {
      auto cfg = resolve_config(moco);
      if (!loss.empty()) cfg.loss_mode = loss;
      pipeline::train_moco(cfg, data_path(moco, cfg), moco_samples, output_path(moco, cfg, "moco.dft"), moco_resume,
                           std::cout, moco_stop);
    } else if (*prb_cmd) {
      const auto cfg = resolve_config(prb);
      pipeline::probe(cfg, data_path(prb, cfg), prb.checkpoint, output_path(prb, cfg, "probe.dft"), std::cout);
    } else if (*ev_cmd) {
      const auto cfg = resolve_config(ev);
      pipeline::eval(cfg, data_path(ev, cfg), ev.checkpoint, probe_ckpt, ev_samples, output_path(ev, cfg, "eval"),
                     std::cout);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
