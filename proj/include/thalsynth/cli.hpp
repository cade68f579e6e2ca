#pragma once

// Command-line front end.  run_cli() is the whole program; tools/ only
// forwards main() to it so tests can drive the CLI in-process.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "thalsynth/dti.hpp"
#include "thalsynth/nifti.hpp"
#include "thalsynth/phantom.hpp"
#include "thalsynth/pipeline.hpp"
#include "thalsynth/supervise.hpp"

namespace thalsynth {

inline constexpr const char* kWorkersEnv = "THALSYNTH_WORKERS";

inline int default_workers() {
  if (const char* env = std::getenv(kWorkersEnv)) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string(kWorkersEnv) + " must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Thalamic-nuclei training-data synthesis"};
  app.require_subcommand(1);

  // fit-dti
  std::string dwi_path, bval_path, bvec_path, out_prefix;
  auto* fit = app.add_subcommand("fit-dti", "Fit tensors to a DWI series; write tensor, FA, V1 and RGB images");
  fit->add_option("--dwi", dwi_path, "4-D diffusion-weighted NIfTI")->required();
  fit->add_option("--bval", bval_path, "b-values file")->required();
  fit->add_option("--bvec", bvec_path, "gradient directions file")->required();
  fit->add_option("--out", out_prefix, "output prefix")->required();

  // fuse
  std::string taxonomy_path, out_path;
  std::vector<std::string> candidates;
  auto* fuse = app.add_subcommand("fuse", "Fuse candidate segmentations into a soft target");
  fuse->add_option("candidates", candidates, "candidate label images")->required();
  fuse->add_option("--taxonomy", taxonomy_path, "taxonomy file")->required();
  fuse->add_option("--out", out_path, "output soft target (4-D NIfTI)")->required();

  // generate
  std::string manifest_path, config_path, out_dir = ".";
  std::uint64_t seed = 0;
  int count = 1;
  std::optional<int> workers;
  bool verbose = false;
  std::string gen_taxonomy;
  auto* gen = app.add_subcommand("generate", "Generate augmented training samples for every case in a manifest");
  gen->add_option("--manifest", manifest_path, "case manifest (JSON)")->required();
  gen->add_option("--config", config_path, "pipeline config (JSON); defaults if omitted");
  gen->add_option("--seed", seed, "master seed");
  gen->add_option("--count", count, "samples per case")->check(CLI::PositiveNumber);
  gen->add_option("--workers", workers, std::string("worker threads (default: ") + kWorkersEnv + " or core count)")
      ->check(CLI::PositiveNumber);
  gen->add_option("--out", out_dir, "output directory");
  gen->add_option("--taxonomy", gen_taxonomy, "taxonomy file (overrides the manifest)");
  gen->add_flag("--verbose", verbose, "report per-sample timings on stderr");

  // loss
  std::string pred_path, target_path, loss_taxonomy;
  bool exclude_background = false;
  auto* loss = app.add_subcommand("loss", "Composite soft-Dice loss between a prediction and a target");
  loss->add_option("pred", pred_path, "predicted probabilities (4-D NIfTI)")->required();
  loss->add_option("target", target_path, "target probabilities (4-D NIfTI)")->required();
  loss->add_option("--taxonomy", loss_taxonomy, "taxonomy file")->required();
  loss->add_flag("--exclude-background", exclude_background, "start the per-label sum at label 1");

  // dice
  std::string seg_a, seg_b, dice_taxonomy, dice_out;
  auto* dice = app.add_subcommand("dice", "Hard Dice at hist/manual/nuclear/whole granularity");
  dice->add_option("a", seg_a, "first label image")->required();
  dice->add_option("b", seg_b, "second label image")->required();
  dice->add_option("--taxonomy", dice_taxonomy, "taxonomy file")->required();
  dice->add_option("--out", dice_out, "write the report here instead of stdout");

  // validate-config
  std::string check_config;
  bool print_default = false;
  auto* validate = app.add_subcommand("validate-config", "Check a config file and print its canonical form and hash");
  validate->add_option("--config", check_config, "pipeline config (JSON)");
  validate->add_flag("--print-default", print_default, "print the default config");

  // make-phantom
  std::string phantom_dir, phantom_id = "phantom";
  int phantom_dim = 160;
  auto* mk = app.add_subcommand("make-phantom", "Write a synthetic test case with manifest and taxonomy");
  mk->add_option("--out", phantom_dir, "output directory")->required();
  mk->add_option("--id", phantom_id, "case id");
  mk->add_option("--dim", phantom_dim, "T1 grid size (voxels per axis)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*fit) {
      const auto dwi = nifti::load_series(dwi_path);
      const TensorVolume tensors = fit_dti(dwi, load_gradient_table(bval_path, bvec_path));
      const TensorMetrics m = tensor_metrics(tensors);
      nifti::save(out_prefix + "_tensor.nii.gz", tensors);
      nifti::save(out_prefix + "_fa.nii.gz", m.fa);
      nifti::save(out_prefix + "_v1.nii.gz", m.v1);
      nifti::save(out_prefix + "_rgb.nii.gz", compose_rgb(m.fa, m.v1));
      out << "wrote " << out_prefix << "_{tensor,fa,v1,rgb}.nii.gz\n";
    } else if (*fuse) {
      const LabelTaxonomy tax = LabelTaxonomy::load(taxonomy_path);
      std::vector<LabelVolume> cands;
      for (const auto& p : candidates) cands.push_back(nifti::load<LabelVolume>(p, 1));
      nifti::save(out_path, fuse_targets(cands, tax));
      out << "wrote " << out_path << "\n";
    } else if (*gen) {
      const PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
      const Manifest manifest =
          load_manifest(manifest_path, gen_taxonomy.empty() ? std::nullopt : std::optional<std::string>(gen_taxonomy));
      BatchOptions opt;
      opt.master_seed = seed;
      opt.count = count;
      opt.workers = workers ? *workers : default_workers();
      opt.out_dir = out_dir;
      opt.verbose = verbose;
      const json index = generate_batch(manifest, cfg, opt);
      out << "wrote " << index["samples"].size() << " samples to " << out_dir << "\n";
    } else if (*loss) {
      const LabelTaxonomy tax = LabelTaxonomy::load(loss_taxonomy);
      const auto pred = nifti::load<ProbVolume>(pred_path, tax.num_channels());
      const auto target = nifti::load<ProbVolume>(target_path, tax.num_channels());
      const LossBreakdown b = composite_loss(pred, target, tax, LossOptions{!exclude_background});
      out.precision(12);
      out << "loss\t" << b.total << "\n"
          << "label_dice_sum\t" << b.label_dice_sum << "\n"
          << "group_dice_sum\t" << b.group_dice_sum << "\n"
          << "whole_dice\t" << b.whole_dice << "\n";
    } else if (*dice) {
      const LabelTaxonomy tax = LabelTaxonomy::load(dice_taxonomy);
      const auto a = nifti::load<LabelVolume>(seg_a, 1);
      const auto b = nifti::load<LabelVolume>(seg_b, 1);
      const std::string report = format_dice_report(hard_dice_report(a, b, tax));
      if (dice_out.empty()) {
        out << report;
      } else {
        std::ofstream f(dice_out);
        f << report;
        if (!f) throw IoError("cannot write '" + dice_out + "'");
      }
    } else if (*validate) {
      if (check_config.empty() && !print_default) throw ConfigError("validate-config needs --config or --print-default");
      const PipelineConfig cfg = check_config.empty() ? PipelineConfig{} : load_config(check_config);
      out << to_json(cfg).dump(2) << "\nconfig_hash " << config_hash(cfg) << "\n";
    } else if (*mk) {
      phantom::Options opt;
      opt.dim = phantom_dim;
      const auto files = phantom::write_case(phantom_dir, phantom_id, opt);
      out << "wrote " << files.manifest << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace thalsynth
