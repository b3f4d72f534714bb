#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lakered/pipeline.hpp"

namespace lakered {

// ---------------------------------------------------------------------------
// Overfit smoke harness: the full model trained on one repeated batch.
// ---------------------------------------------------------------------------

struct OverfitResult {
  double initial_smoothed = 0;
  double best_smoothed = 0;
  long best_step = 0;
  bool reached_10pct = false;
  std::vector<double> totals;
};

// Trains the full (BKRM+RCEM+LMP) model on a fixed batch; t and the noise are
// redrawn each step, everything else repeats. Reports the trailing-window
// smoothed total against the smoothed value over the first window.
inline OverfitResult overfit_smoke(const RunConfig& cfg,
                                   const DatasetManifest& manifest,
                                   const std::string& ae_ckpt_path,
                                   int batch_items, long steps, int window = 25,
                                   bool quiet = true) {
  VQVAE<float> ae = load_vqvae_checkpoint(ae_ckpt_path, cfg);
  const auto train_entries = manifest.split("train");
  if (int(train_entries.size()) < batch_items)
    throw DataError("overfit_smoke: not enough training entries");

  LoadOptions lo;
  lo.target_height = cfg.image_height;
  lo.target_width = cfg.image_width;

  std::vector<GridF> raw;
  std::vector<CamoPair> pairs;
  for (int i = 0; i < batch_items; ++i) {
    pairs.push_back(load_pair(manifest, train_entries[size_t(i)], lo));
    raw.push_back(ae.encode(pairs.back().image));
  }
  LatentStats stats = compute_latent_stats(raw);

  LdmModel model;
  init_ldm_model(model, cfg, AblationSpec::make(true, true, true), ae);
  model.stats = stats;

  std::vector<PreparedItem> items;
  for (const auto& p : pairs)
    items.push_back(prepare_item(cfg, ae, p, &stats, true));
  std::vector<const PreparedItem*> batch;
  for (const auto& it : items) batch.push_back(&it);

  nn::ParamSet<float> params;
  model.unet.collect(params);
  model.retrieval.collect(params);
  model.fusion.collect(params);
  nn::Adam<float> adam;
  adam.lr = float(cfg.lr_ldm);
  adam.init(params);

  OverfitResult res;
  double trailing = 0;
  std::vector<double> recent;
  for (long step = 0; step < steps; ++step) {
    Rng noise_rng = derive_rng(cfg.seed, "overfit-noise:" + std::to_string(step));
    const LdmStepResult r =
        ldm_train_step(cfg, model, params, adam, batch, noise_rng);
    res.totals.push_back(r.total);
    recent.push_back(r.total);
    if (int(recent.size()) > window) recent.erase(recent.begin());
    trailing = 0;
    for (double v : recent) trailing += v;
    trailing /= double(recent.size());

    if (step + 1 == window) res.initial_smoothed = trailing;
    if (step + 1 >= window &&
        (res.best_step == 0 || trailing < res.best_smoothed)) {
      res.best_smoothed = trailing;
      res.best_step = step + 1;
    }
    if (!quiet && (step + 1) % 100 == 0)
      std::fprintf(stderr, "  [overfit] step %ld/%ld smoothed=%.4f\n", step + 1,
                   steps, trailing);
  }
  res.reached_10pct = res.best_smoothed < 0.1 * res.initial_smoothed;
  return res;
}

// ---------------------------------------------------------------------------
// Table-2 style ablation: four rows, shared seeds, identical budgets.
// ---------------------------------------------------------------------------

struct AblationRowResult {
  std::string row;
  uint64_t seed = 0;
  double fid = 0;
  double kid = 0;
  size_t total_params = 0;
  size_t conditioning_params = 0;
  double images_per_sec = 0;
  double final_train_total = 0;
};

struct AblationReport {
  std::vector<AblationRowResult> rows;        // every (row, seed) pair
  std::vector<AblationRowResult> seed_means;  // per row, averaged over seeds
  std::vector<uint64_t> seeds;
  double vqvae_recon_mse = 0;
};

inline void export_reference_images(const DatasetManifest& manifest,
                                    const std::string& split,
                                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& e : manifest.split(split))
    std::filesystem::copy_file(
        manifest.image_path(e.id), dir / (e.id + ".png"),
        std::filesystem::copy_options::overwrite_existing);
}

inline AblationReport run_ablation(const RunConfig& base_cfg,
                                   const DatasetManifest& manifest,
                                   const std::filesystem::path& out_dir,
                                   int n_seeds, DeskExtractor& extractor,
                                   bool quiet = false) {
  std::filesystem::create_directories(out_dir);
  AblationReport report;

  const auto reference_dir = out_dir / "reference";
  export_reference_images(manifest, "test", reference_dir);

  for (int si = 0; si < n_seeds; ++si) {
    RunConfig cfg = base_cfg;
    cfg.seed = si == 0 ? base_cfg.seed
                       : derive_seed(base_cfg.seed, "ablate:" + std::to_string(si));
    report.seeds.push_back(cfg.seed);
    const auto seed_dir = out_dir / ("seed_" + std::to_string(si));

    if (!quiet)
      std::fprintf(stderr, "[ablate] seed %d/%d: training vqvae (%d steps)\n",
                   si + 1, n_seeds, cfg.vqvae_steps);
    VqvaeTrainResult ae_res = train_vqvae(cfg, manifest, seed_dir / "vqvae");
    report.vqvae_recon_mse += ae_res.final_recon_mse / n_seeds;

    for (const AblationSpec& row : ablation_rows()) {
      const auto row_dir = seed_dir / row.name();
      if (!quiet)
        std::fprintf(stderr, "[ablate] seed %d/%d row %s: training ldm (%d steps)\n",
                     si + 1, n_seeds, row.name().c_str(), cfg.ldm_steps);
      LdmTrainResult ldm_res =
          train_ldm(cfg, manifest, ae_res.checkpoint_path.string(), row,
                    row_dir, false, quiet);

      GenerateOptions gopt;
      gopt.out_dir = row_dir / "generated";
      gopt.seed = cfg.seed;
      gopt.sample_steps = cfg.sample_steps;
      gopt.split = "test";
      if (!quiet)
        std::fprintf(stderr, "[ablate] seed %d/%d row %s: generating\n", si + 1,
                     n_seeds, row.name().c_str());
      GenerateResult gen = generate(cfg, manifest, ae_res.checkpoint_path.string(),
                                    ldm_res.checkpoint_path.string(), gopt);

      std::string bad_id;
      if (!audit_foreground_preservation(gopt.out_dir, manifest, "test", &bad_id))
        throw DataError("foreground preservation audit failed for id " + bad_id);

      MetricsReport metrics =
          evaluate(gopt.out_dir, reference_dir, extractor, cfg.kid_block_size,
                   hex64(config_hash(cfg)));
      write_report(metrics, (row_dir / "metrics.json").string());

      VQVAE<float> ae = load_vqvae_checkpoint(ae_res.checkpoint_path.string(), cfg);
      LdmModel model = load_ldm_checkpoint(ldm_res.checkpoint_path.string(), cfg, ae);

      AblationRowResult r;
      r.row = row.name();
      r.seed = cfg.seed;
      r.fid = metrics.fid;
      r.kid = metrics.kid;
      r.total_params = model.param_count();
      r.conditioning_params = model.conditioning_param_count();
      r.images_per_sec = gen.images_per_sec;
      r.final_train_total = ldm_res.final_total;
      report.rows.push_back(r);
      if (!quiet)
        std::fprintf(stderr, "[ablate] seed %d/%d row %s: fid=%.3f kid=%.5f\n",
                     si + 1, n_seeds, row.name().c_str(), r.fid, r.kid);
    }
  }

  // Seed-averaged rows in Table-2 order.
  for (const AblationSpec& row : ablation_rows()) {
    AblationRowResult mean;
    mean.row = row.name();
    int n = 0;
    for (const auto& r : report.rows)
      if (r.row == row.name()) {
        mean.fid += r.fid;
        mean.kid += r.kid;
        mean.total_params = r.total_params;
        mean.conditioning_params = r.conditioning_params;
        mean.images_per_sec += r.images_per_sec;
        mean.final_train_total += r.final_train_total;
        ++n;
      }
    if (n > 0) {
      mean.fid /= n;
      mean.kid /= n;
      mean.images_per_sec /= n;
      mean.final_train_total /= n;
    }
    report.seed_means.push_back(mean);
  }
  return report;
}

inline nlohmann::ordered_json ablation_report_json(const AblationReport& rep,
                                                   const std::string& extractor_id,
                                                   const std::string& config_hash_hex) {
  nlohmann::ordered_json j;
  j["schema"] = "lakered-ablation-v1";
  j["extractor"] = extractor_id;
  j["config_hash"] = config_hash_hex;
  j["paper_comparable"] = false;
  j["seeds"] = rep.seeds;
  j["vqvae_recon_mse"] = rep.vqvae_recon_mse;
  size_t base_params = 0;
  for (const auto& m : rep.seed_means)
    if (m.row == "base") base_params = m.total_params;
  auto row_json = [&](const AblationRowResult& r) {
    nlohmann::ordered_json rj;
    rj["row"] = r.row;
    rj["fid"] = r.fid;
    rj["kid"] = r.kid;
    rj["params"] = r.total_params;
    rj["param_delta_vs_base"] =
        long(r.total_params) - long(base_params);
    rj["conditioning_params"] = r.conditioning_params;
    rj["images_per_sec"] = r.images_per_sec;
    rj["final_train_total"] = r.final_train_total;
    return rj;
  };
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rep.rows) {
    auto rj = row_json(r);
    rj["seed"] = r.seed;
    j["rows"].push_back(rj);
  }
  j["seed_means"] = nlohmann::ordered_json::array();
  for (const auto& r : rep.seed_means) j["seed_means"].push_back(row_json(r));
  return j;
}

inline void print_ablation_table(const AblationReport& rep, std::ostream& os) {
  os << "row              FID      KID        params   +delta  cond.params  img/s\n";
  size_t base_params = 0;
  for (const auto& m : rep.seed_means)
    if (m.row == "base") base_params = m.total_params;
  for (const auto& r : rep.seed_means) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-14s %8.3f %8.5f %10zu %+8ld %12zu %6.2f\n",
                  r.row.c_str(), r.fid, r.kid, r.total_params,
                  long(r.total_params) - long(base_params),
                  r.conditioning_params, r.images_per_sec);
    os << buf;
  }
  os << "(seed-averaged over " << rep.seeds.size()
     << " seeds; desk extractor, not paper-comparable)\n";
}

}  // namespace lakered
