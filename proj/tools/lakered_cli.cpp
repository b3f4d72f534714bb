// Command-line driver for the camouflaged-image generation pipeline:
// dataset synthesis, VQ-VAE and diffusion training, generation, FID/KID
// evaluation and the ablation runner.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "lakered/ablation.hpp"
#include "lakered/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lakered;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitCheckpoint = 4;

#ifndef LAKERED_DATA_DIR
#define LAKERED_DATA_DIR "data"
#endif

std::string default_extractor_path() {
  return std::string(LAKERED_DATA_DIR) + "/desk_extractor_v1.bin";
}

RunConfig load_cfg(const std::string& path, uint64_t seed_override,
                   bool has_seed) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  if (has_seed) cfg.seed = seed_override;
  validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lakered: camouflaged image generation via latent background "
               "knowledge retrieval"};
  app.require_subcommand(1);

  std::string config_path, data_root, out_dir;
  uint64_t seed = 0;
  bool has_seed = false;
  app.add_option("--config", config_path, "run configuration file")
      ->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "master seed override");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate the toy dataset");
  int synth_count = 2000, synth_size = 64;
  double synth_train_fraction = 0.89;
  synth->add_option("--out", out_dir, "dataset root directory")->required();
  synth->add_option("--count", synth_count, "number of pairs");
  synth->add_option("--size", synth_size, "image size in pixels");
  synth->add_option("--train-fraction", synth_train_fraction,
                    "fraction tagged train");

  // train-vqvae
  auto* tvq = app.add_subcommand("train-vqvae", "train the autoencoder");
  bool resume = false;
  tvq->add_option("--data", data_root, "dataset root")->required();
  tvq->add_option("--out", out_dir, "output directory")->required();
  tvq->add_flag("--resume", resume, "resume from checkpoint in --out");

  // train-ldm
  auto* tldm = app.add_subcommand("train-ldm", "train the diffusion model");
  std::string ae_ckpt, ablation_row = "full";
  bool flag_bkrm = false, flag_rcem = false, flag_lmp = false;
  tldm->add_option("--data", data_root, "dataset root")->required();
  tldm->add_option("--ae", ae_ckpt, "autoencoder checkpoint")->required();
  tldm->add_option("--out", out_dir, "output directory")->required();
  tldm->add_option("--row", ablation_row,
                   "ablation row: base|bkrm|bkrm_rcem|full");
  tldm->add_flag("--bkrm", flag_bkrm, "enable BKRM (overrides --row)");
  tldm->add_flag("--rcem", flag_rcem, "enable RCEM (requires --bkrm)");
  tldm->add_flag("--lmp", flag_lmp, "enable LMP (requires --bkrm)");
  tldm->add_flag("--resume", resume, "resume from checkpoint in --out");

  // generate
  auto* gen = app.add_subcommand("generate", "sample camouflaged images");
  std::string ldm_ckpt, split = "test", debug_dir;
  int sample_steps = 0, limit = 0;
  bool allow_mismatch = false;
  gen->add_option("--data", data_root, "dataset root")->required();
  gen->add_option("--ae", ae_ckpt, "autoencoder checkpoint")->required();
  gen->add_option("--ckpt", ldm_ckpt, "ldm checkpoint")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--split", split, "manifest split to generate for");
  gen->add_option("--steps", sample_steps, "sampling steps (default: config)");
  gen->add_option("--limit", limit, "generate at most N pairs (0 = all)");
  gen->add_option("--debug-dump", debug_dir,
                  "dump superpixel label maps and attention weights here");
  gen->add_flag("--allow-config-mismatch", allow_mismatch,
                "load checkpoints whose config hash differs");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "compute FID/KID between dirs");
  std::string generated_dir, reference_dir, report_path, extractor_path;
  bool claim_comparable = false;
  eval->add_option("--generated", generated_dir, "generated image directory")
      ->required();
  eval->add_option("--reference", reference_dir, "reference image directory")
      ->required();
  eval->add_option("--out", report_path, "report JSON path")->required();
  eval->add_option("--extractor", extractor_path, "feature extractor weights");
  eval->add_flag("--claim-paper-comparable", claim_comparable,
                 "request the paper-comparable label (always refused for the "
                 "desk extractor)");

  // ablate
  auto* abl = app.add_subcommand("ablate", "run the four-row ablation");
  int n_seeds = 3;
  abl->add_option("--data", data_root, "dataset root")->required();
  abl->add_option("--out", out_dir, "output directory")->required();
  abl->add_option("--seeds", n_seeds, "number of seeds");
  abl->add_option("--extractor", extractor_path, "feature extractor weights");

  CLI11_PARSE(app, argc, argv);
  has_seed = seed_opt->count() > 0;

  try {
    if (*synth) {
      ToyDataOptions topt;
      topt.count = synth_count;
      topt.size = synth_size;
      topt.train_fraction = synth_train_fraction;
      RunConfig cfg = load_cfg(config_path, seed, has_seed);
      topt.seed = cfg.seed;
      topt.latent_factor = cfg.latent_factor;
      DatasetManifest m = synth_toy_dataset(out_dir, topt);
      std::cout << "wrote " << m.entries.size() << " pairs to " << out_dir
                << "\n";
    } else if (*tvq) {
      RunConfig cfg = load_cfg(config_path, seed, has_seed);
      DatasetManifest m = load_manifest(data_root);
      VqvaeTrainResult r = train_vqvae(cfg, m, out_dir, resume);
      std::cout << "vqvae trained: steps=" << r.steps
                << " recon_mse=" << r.final_recon_mse << " checkpoint="
                << r.checkpoint_path.string() << "\n";
    } else if (*tldm) {
      RunConfig cfg = load_cfg(config_path, seed, has_seed);
      DatasetManifest m = load_manifest(data_root);
      AblationSpec spec = (flag_bkrm || flag_rcem || flag_lmp)
                              ? AblationSpec::make(flag_bkrm, flag_rcem, flag_lmp)
                              : AblationSpec::parse(ablation_row);
      LdmTrainResult r = train_ldm(cfg, m, ae_ckpt, spec, out_dir, resume);
      std::cout << "ldm trained: row=" << spec.name() << " steps=" << r.steps
                << " final_total=" << r.final_total << " checkpoint="
                << r.checkpoint_path.string() << "\n";
    } else if (*gen) {
      RunConfig cfg = load_cfg(config_path, seed, has_seed);
      DatasetManifest m = load_manifest(data_root);
      GenerateOptions opt;
      opt.out_dir = out_dir;
      opt.seed = cfg.seed;
      opt.sample_steps = sample_steps > 0 ? sample_steps : cfg.sample_steps;
      opt.split = split;
      opt.limit = limit;
      opt.allow_config_mismatch = allow_mismatch;
      if (!debug_dir.empty()) opt.debug_dir = debug_dir;
      GenerateResult r = generate(cfg, m, ae_ckpt, ldm_ckpt, opt);
      std::string bad_id;
      if (!audit_foreground_preservation(out_dir, m, split, &bad_id))
        throw DataError("foreground preservation audit failed for id " + bad_id);
      std::cout << "generated " << r.count << " images ("
                << r.images_per_sec << " img/s), foreground audit passed\n";
    } else if (*eval) {
      RunConfig cfg = load_cfg(config_path, seed, has_seed);
      if (extractor_path.empty()) extractor_path = default_extractor_path();
      DeskExtractor extractor = DeskExtractor::load(extractor_path);
      MetricsReport r = evaluate(generated_dir, reference_dir, extractor,
                                 cfg.kid_block_size, hex64(config_hash(cfg)));
      write_report(r, report_path, claim_comparable);
      std::cout << "fid=" << r.fid << " kid=" << r.kid << " n_gen="
                << r.n_generated << " n_ref=" << r.n_reference
                << " extractor=" << r.extractor_id << "\n";
    } else if (*abl) {
      RunConfig cfg = load_cfg(config_path, seed, has_seed);
      DatasetManifest m = load_manifest(data_root);
      if (extractor_path.empty()) extractor_path = default_extractor_path();
      DeskExtractor extractor = DeskExtractor::load(extractor_path);
      AblationReport rep = run_ablation(cfg, m, out_dir, n_seeds, extractor);
      auto j = ablation_report_json(rep, extractor.id, hex64(config_hash(cfg)));
      std::ofstream out(fs::path(out_dir) / "ablation_report.json");
      out << j.dump(2) << "\n";
      print_ablation_table(rep, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
