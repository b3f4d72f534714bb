#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lakered/autoencoder.hpp"
#include "lakered/checkpoint.hpp"
#include "lakered/conditioning.hpp"
#include "lakered/config.hpp"
#include "lakered/dataset.hpp"
#include "lakered/diffusion.hpp"
#include "lakered/evaluation.hpp"
#include "lakered/png_io.hpp"

namespace lakered {

// ---------------------------------------------------------------------------
// Ablation toggles (Table-2 style rows). LMP and RCEM both require BKRM;
// violations are configuration errors caught at parse time.
// ---------------------------------------------------------------------------

struct AblationSpec {
  bool bkrm = false;
  bool rcem = false;
  bool lmp = false;

  static AblationSpec make(bool bkrm, bool rcem, bool lmp) {
    if (rcem && !bkrm) throw ConfigError("ablation: RCEM requires BKRM");
    if (lmp && !bkrm) throw ConfigError("ablation: LMP requires BKRM");
    return {bkrm, rcem, lmp};
  }
  static AblationSpec parse(const std::string& name) {
    if (name == "base") return make(false, false, false);
    if (name == "bkrm") return make(true, false, false);
    if (name == "bkrm_rcem") return make(true, true, false);
    if (name == "bkrm_rcem_lmp" || name == "full") return make(true, true, true);
    throw ConfigError("unknown ablation row: " + name);
  }
  std::string name() const {
    if (!bkrm) return "base";
    std::string n = "bkrm";
    if (rcem) n += "_rcem";
    if (lmp) n += "_lmp";
    return n;
  }
};

// Table-2 row order.
inline std::vector<AblationSpec> ablation_rows() {
  return {AblationSpec::make(false, false, false),
          AblationSpec::make(true, false, false),
          AblationSpec::make(true, true, false),
          AblationSpec::make(true, true, true)};
}

// ---------------------------------------------------------------------------
// Training log: append-only JSON lines.
// ---------------------------------------------------------------------------

struct TrainLogRecord {
  long step = 0;
  double l_diff = 0;
  double l_bgrec = 0;
  double total = 0;
  double wall_ms = 0;
};

class TrainLog {
 public:
  explicit TrainLog(const std::filesystem::path& path, bool append)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw DataError("cannot open training log: " + path.string());
  }
  void write(const TrainLogRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["l_diff"] = r.l_diff;
    j["l_bgrec"] = r.l_bgrec;
    j["total"] = r.total;
    j["wall_ms"] = r.wall_ms;
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<TrainLogRecord> read_train_log(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open training log: " + path.string());
  std::vector<TrainLogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    TrainLogRecord r;
    r.step = j.at("step").get<long>();
    r.l_diff = j.at("l_diff").get<double>();
    r.l_bgrec = j.at("l_bgrec").get<double>();
    r.total = j.at("total").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    out.push_back(r);
  }
  return out;
}

// One training process per output directory: advisory flock on a lock file,
// released when the holder exits.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir / ".lock";
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw DataError("cannot open lock file: " + path_.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw DataError("output directory is locked by another process: " +
                      dir.string());
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd_, pid.data(), pid.size());
  }
  ~DirectoryLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline double wall_ms_since(
    const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

// ---------------------------------------------------------------------------
// VQ-VAE training.
// ---------------------------------------------------------------------------

struct VqvaeTrainResult {
  std::filesystem::path checkpoint_path;
  double final_recon_mse = 0;
  double final_total = 0;
  long steps = 0;
};

inline void save_vqvae_checkpoint(VQVAE<float>& model, const RunConfig& cfg,
                                  long step, const std::string& path) {
  Checkpoint ck;
  ck.config_hash = config_hash(cfg);
  ck.step = uint64_t(step);
  ck.set_meta("kind", "vqvae");
  nn::ParamSet<float> ps;
  model.collect(ps);
  ck.add_params(ps);
  ck.save(path);
}

inline VQVAE<float> load_vqvae_checkpoint(const std::string& path,
                                          const RunConfig& cfg,
                                          bool allow_config_mismatch = false,
                                          long* step_out = nullptr) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.get_meta("kind").value_or("") != "vqvae")
    throw CheckpointError("not a vqvae checkpoint: " + path);
  if (ck.config_hash != config_hash(cfg) && !allow_config_mismatch)
    throw CheckpointError(
        "vqvae checkpoint config hash mismatch (use the override flag to "
        "load anyway): " +
        path);
  VQVAE<float> model;
  Rng rng(0);  // shapes only; weights overwritten below
  model.init(cfg.latent_factor, cfg.codebook_size, cfg.embed_dim,
             cfg.vqvae_width, rng);
  nn::ParamSet<float> ps;
  model.collect(ps);
  ck.load_params(ps);
  if (step_out) *step_out = long(ck.step);
  return model;
}

inline VqvaeTrainResult train_vqvae(const RunConfig& cfg,
                                    const DatasetManifest& manifest,
                                    const std::filesystem::path& out_dir,
                                    bool resume = false) {
  DirectoryLock lock(out_dir);
  const auto t_start = std::chrono::steady_clock::now();
  const auto train_entries = manifest.split("train");
  if (train_entries.empty()) throw DataError("no training entries in manifest");

  LoadOptions lo;
  lo.target_height = cfg.image_height;
  lo.target_width = cfg.image_width;
  std::vector<ImageU8> images;
  images.reserve(train_entries.size());
  for (const auto& e : train_entries)
    images.push_back(to_u8(load_pair(manifest, e, lo).image));

  VQVAE<float> model;
  Rng init_rng = derive_rng(cfg.seed, "vqvae-init");
  model.init(cfg.latent_factor, cfg.codebook_size, cfg.embed_dim,
             cfg.vqvae_width, init_rng);

  const std::string ckpt_path = (out_dir / "vqvae.ckpt").string();
  long start_step = 0;
  if (resume && std::filesystem::exists(ckpt_path))
    model = load_vqvae_checkpoint(ckpt_path, cfg, false, &start_step);

  nn::ParamSet<float> params;
  model.collect(params, /*include_codebook=*/!cfg.vq_ema);
  nn::Adam<float> adam;
  adam.lr = float(cfg.lr_vqvae);
  adam.init(params);
  // Note: optimizer moments restart on resume; the step counter continues.

  // EMA codebook accumulators.
  std::vector<double> ema_count(size_t(cfg.codebook_size), 1.0);
  std::vector<double> ema_sum(size_t(cfg.codebook_size) * cfg.embed_dim, 0.0);
  if (cfg.vq_ema)
    for (int k = 0; k < cfg.codebook_size; ++k)
      for (int d = 0; d < cfg.embed_dim; ++d)
        ema_sum[size_t(k) * cfg.embed_dim + d] =
            model.codebook.w[size_t(k) * cfg.embed_dim + d];

  TrainLog log(out_dir / "train_vqvae.log", resume && start_step > 0);
  double last_recon = 0, last_total = 0;

  for (long step = start_step; step < cfg.vqvae_steps; ++step) {
    Rng data_rng = derive_rng(cfg.seed, "vqvae-data:" + std::to_string(step));
    params.zero_grad();

    double recon_acc = 0, total_acc = 0;
    std::vector<int> batch_count(size_t(cfg.codebook_size), 0);
    std::vector<double> batch_sum(size_t(cfg.codebook_size) * cfg.embed_dim, 0);

    for (int b = 0; b < cfg.batch_size; ++b) {
      const int idx = data_rng.uniform_int(0, int(images.size()) - 1);
      GridF img = to_float(images[idx]);
      GridF z_e = model.encode(img);
      auto q = model.quantize(z_e);
      GridF recon = model.run_decoder(q.quantized);

      const VqLossTerms terms = vqvae_loss(img, recon, z_e, q.quantized,
                                           cfg.vq_beta);
      recon_acc += terms.reconstruction;
      total_acc += terms.total;

      // d recon term.
      GridF drecon(recon.h, recon.w, recon.c);
      const double rscale = 2.0 / (double(recon.v.size()) * cfg.batch_size);
      for (size_t i = 0; i < recon.v.size(); ++i)
        drecon.v[i] = float(rscale * (double(recon.v[i]) - double(img.v[i])));
      GridF dz_q = model.run_decoder_backward(drecon);

      // Straight-through into the encoder plus the commitment term.
      GridF dz_e = dz_q;
      const double lscale = 2.0 / (double(z_e.v.size()) * cfg.batch_size);
      for (size_t i = 0; i < z_e.v.size(); ++i)
        dz_e.v[i] += float(cfg.vq_beta * lscale *
                           (double(z_e.v[i]) - double(q.quantized.v[i])));
      model.encode_backward(dz_e);

      // Codebook: gradient route or EMA accumulation.
      for (int cell = 0; cell < z_e.h * z_e.w; ++cell) {
        const int k = q.indices[cell];
        batch_count[k] += 1;
        for (int d = 0; d < cfg.embed_dim; ++d) {
          const double ze = z_e.v[size_t(cell) * cfg.embed_dim + d];
          if (cfg.vq_ema) {
            batch_sum[size_t(k) * cfg.embed_dim + d] += ze;
          } else {
            model.codebook.g[size_t(k) * cfg.embed_dim + d] += float(
                lscale * (double(model.codebook.w[size_t(k) * cfg.embed_dim + d]) -
                          ze));
          }
        }
      }
    }
    adam.step(params);

    if (cfg.vq_ema) {
      const double d = cfg.vq_ema_decay;
      for (int k = 0; k < cfg.codebook_size; ++k) {
        ema_count[k] = d * ema_count[k] + (1 - d) * batch_count[k];
        for (int ch = 0; ch < cfg.embed_dim; ++ch) {
          auto& s = ema_sum[size_t(k) * cfg.embed_dim + ch];
          s = d * s + (1 - d) * batch_sum[size_t(k) * cfg.embed_dim + ch];
          model.codebook.w[size_t(k) * cfg.embed_dim + ch] =
              float(s / std::max(ema_count[k], 1e-8));
        }
      }
    }

    last_recon = recon_acc / cfg.batch_size;
    last_total = total_acc / cfg.batch_size;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.vqvae_steps) {
      TrainLogRecord r;
      r.step = step + 1;
      r.l_diff = last_recon;  // reconstruction occupies the diffusion slot
      r.l_bgrec = 0;
      r.total = last_recon;
      r.wall_ms = wall_ms_since(t_start);
      log.write(r);
    }
    if ((step + 1) % cfg.checkpoint_every == 0)
      save_vqvae_checkpoint(model, cfg, step + 1, ckpt_path);
  }
  save_vqvae_checkpoint(model, cfg, cfg.vqvae_steps, ckpt_path);

  VqvaeTrainResult res;
  res.checkpoint_path = ckpt_path;
  res.final_recon_mse = last_recon;
  res.final_total = last_total;
  res.steps = cfg.vqvae_steps;
  return res;
}

// ---------------------------------------------------------------------------
// Latent preparation shared by diffusion training and generation.
// ---------------------------------------------------------------------------

struct LatentStats {
  std::vector<float> mean{0, 0, 0};
  std::vector<float> stddev{1, 1, 1};
};

inline void standardize(GridF& g, const LatentStats& st) {
  for (int cell = 0; cell < g.h * g.w; ++cell)
    for (int ch = 0; ch < g.c; ++ch) {
      auto& v = g.v[size_t(cell) * g.c + ch];
      v = (v - st.mean[ch]) / st.stddev[ch];
    }
}

inline void unstandardize(GridF& g, const LatentStats& st) {
  for (int cell = 0; cell < g.h * g.w; ++cell)
    for (int ch = 0; ch < g.c; ++ch) {
      auto& v = g.v[size_t(cell) * g.c + ch];
      v = v * st.stddev[ch] + st.mean[ch];
    }
}

struct PreparedItem {
  std::string id;
  GridF z0;  // standardized target latent
  GridF cf;  // standardized condition features (masked image encoding)
  Mask cm;
  SuperpixelMap spx;
};

inline SuperpixelMap superpixels_for(const RunConfig& cfg, const GridF& cf,
                                     const Mask& cm, const std::string& id,
                                     bool lmp) {
  if (!lmp) return trivial_superpixel_map(cm);
  return compute_superpixels(cf, cm, cfg.superpixels, cfg.slic_compactness,
                             cfg.slic_iterations,
                             derive_seed(cfg.seed, "slic:" + id));
}

inline PreparedItem prepare_item(const RunConfig& cfg, VQVAE<float>& ae,
                                 const CamoPair& pair,
                                 const LatentStats* stats, bool lmp) {
  PreparedItem item;
  item.id = pair.id;
  item.cm = downsample_mask(pair.mask, cfg.latent_factor);
  require_nondegenerate(item.cm, "latent mask for " + pair.id);
  item.z0 = ae.encode(pair.image);
  item.cf = ae.encode(mask_known_region(pair.image, pair.mask));
  if (stats) {
    standardize(item.z0, *stats);
    standardize(item.cf, *stats);
  }
  item.spx = superpixels_for(cfg, item.cf, item.cm, item.id, lmp);
  return item;
}

inline LatentStats compute_latent_stats(const std::vector<GridF>& latents) {
  LatentStats st;
  if (latents.empty()) throw DataError("compute_latent_stats: empty set");
  const int c = latents.front().c;
  st.mean.assign(size_t(c), 0.0f);
  st.stddev.assign(size_t(c), 1.0f);
  std::vector<double> sum(size_t(c), 0), sq(size_t(c), 0);
  size_t n = 0;
  for (const auto& g : latents) {
    for (int cell = 0; cell < g.h * g.w; ++cell)
      for (int ch = 0; ch < c; ++ch) {
        const double v = g.v[size_t(cell) * c + ch];
        sum[ch] += v;
        sq[ch] += v * v;
      }
    n += size_t(g.h) * g.w;
  }
  for (int ch = 0; ch < c; ++ch) {
    const double mean = sum[ch] / double(n);
    const double var = std::max(sq[ch] / double(n) - mean * mean, 1e-8);
    st.mean[ch] = float(mean);
    st.stddev[ch] = float(std::sqrt(var));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Diffusion (LDM) training.
// ---------------------------------------------------------------------------

struct LdmModel {
  UNet<float> unet;
  RetrievalParams<float> retrieval;
  FusionParams<float> fusion;
  MatX<float> eg;  // frozen retrieval memory
  LatentStats stats;
  AblationSpec ablation;
  NoiseSchedule schedule;
  long step = 0;

  size_t param_count() {
    nn::ParamSet<float> ps;
    unet.collect(ps);
    if (ablation.bkrm) {
      retrieval.collect(ps);
      fusion.collect(ps);
    }
    return ps.total_count();
  }
  size_t conditioning_param_count() {
    if (!ablation.bkrm) return 0;
    nn::ParamSet<float> ps;
    retrieval.collect(ps);
    fusion.collect(ps);
    return ps.total_count();
  }
};

inline void init_ldm_model(LdmModel& m, const RunConfig& cfg,
                           const AblationSpec& ablation, VQVAE<float>& ae) {
  m.ablation = ablation;
  m.schedule = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
  Rng unet_rng = derive_rng(cfg.seed, "unet-init");
  m.unet.init(cfg.latent_channels, cfg.latent_channels, cfg.unet_width,
              unet_rng);
  Rng retr_rng = derive_rng(cfg.seed, "retrieval-init");
  m.retrieval.init(cfg.attn_heads, cfg.latent_channels, cfg.embed_dim,
                   cfg.attn_dim_k, cfg.attn_dim_v, retr_rng);
  Rng fusion_rng = derive_rng(cfg.seed, "fusion-init");
  m.fusion.init(cfg.latent_channels, fusion_rng);
  m.eg = export_global_embedding(ae);
}

inline void save_ldm_checkpoint(LdmModel& m, const RunConfig& cfg, long step,
                                uint64_t ae_hash, const std::string& path) {
  Checkpoint ck;
  ck.config_hash = config_hash(cfg);
  ck.step = uint64_t(step);
  ck.set_meta("kind", "ldm");
  ck.set_meta("ablation", m.ablation.name());
  ck.set_meta("ae_checkpoint", hex64(ae_hash));
  nn::ParamSet<float> ps;
  m.unet.collect(ps);
  if (m.ablation.bkrm) {
    m.retrieval.collect(ps);
    m.fusion.collect(ps);
  }
  ck.add_params(ps);
  ck.add_tensor("latent.mean", {int(m.stats.mean.size())}, m.stats.mean);
  ck.add_tensor("latent.stddev", {int(m.stats.stddev.size())}, m.stats.stddev);
  std::vector<float> eg_data(m.eg.data(), m.eg.data() + m.eg.size());
  ck.add_tensor("retrieval.eg", {int(m.eg.rows()), int(m.eg.cols())}, eg_data);
  ck.save(path);
}

inline LdmModel load_ldm_checkpoint(const std::string& path,
                                    const RunConfig& cfg, VQVAE<float>& ae,
                                    bool allow_config_mismatch = false) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.get_meta("kind").value_or("") != "ldm")
    throw CheckpointError("not an ldm checkpoint: " + path);
  if (ck.config_hash != config_hash(cfg) && !allow_config_mismatch)
    throw CheckpointError(
        "ldm checkpoint config hash mismatch (use the override flag to load "
        "anyway): " +
        path);
  LdmModel m;
  init_ldm_model(m, cfg, AblationSpec::parse(ck.get_meta("ablation").value_or("base")), ae);
  m.step = long(ck.step);
  nn::ParamSet<float> ps;
  m.unet.collect(ps);
  if (m.ablation.bkrm) {
    m.retrieval.collect(ps);
    m.fusion.collect(ps);
  }
  ck.load_params(ps);
  const Checkpoint::Entry* mean = ck.find("latent.mean");
  const Checkpoint::Entry* stddev = ck.find("latent.stddev");
  if (!mean || !stddev) throw CheckpointError("checkpoint missing latent stats");
  m.stats.mean = mean->data;
  m.stats.stddev = stddev->data;
  const Checkpoint::Entry* eg = ck.find("retrieval.eg");
  if (!eg) throw CheckpointError("checkpoint missing retrieval memory");
  m.eg = MatX<float>(eg->shape.at(0), eg->shape.at(1));
  std::copy(eg->data.begin(), eg->data.end(), m.eg.data());
  return m;
}

inline std::string expected_ae_hash(const std::string& ldm_ckpt_path) {
  Checkpoint ck = Checkpoint::load(ldm_ckpt_path);
  return ck.get_meta("ae_checkpoint").value_or("");
}

struct LdmStepResult {
  double l_diff = 0;
  double l_bgrec = 0;
  double total = 0;
};

// One optimizer step over a batch of prepared items. Exposed so the overfit
// harness and the trainer share the exact same update.
inline LdmStepResult ldm_train_step(const RunConfig& cfg, LdmModel& m,
                                    nn::ParamSet<float>& params,
                                    nn::Adam<float>& adam,
                                    const std::vector<const PreparedItem*>& batch,
                                    Rng& noise_rng) {
  params.zero_grad();
  LdmStepResult out;
  const int T = m.schedule.steps;
  for (const PreparedItem* item : batch) {
    const int t = noise_rng.uniform_int(1, T);
    GridF eps(item->z0.h, item->z0.w, item->z0.c);
    for (auto& v : eps.v) v = float(noise_rng.normal());

    ConditioningStack<float> stack;
    GridF cond_features;
    if (m.ablation.bkrm) {
      stack.retrieval = &m.retrieval;
      stack.fusion = &m.fusion;
      stack.eg = &m.eg;
      cond_features = stack.forward(item->cf, item->cm, item->spx).features;
    } else {
      cond_features = item->cf;
    }

    GridF zt = forward_noise(item->z0, t, eps, m.schedule);
    GridF eps_hat = m.unet.forward(zt, cond_features, item->cm, t);
    out.l_diff += mse(eps_hat, eps);

    GridF deps(eps_hat.h, eps_hat.w, eps_hat.c);
    const double scale = 2.0 / (double(eps_hat.v.size()) * batch.size());
    for (size_t i = 0; i < deps.v.size(); ++i)
      deps.v[i] =
          float(scale * (double(eps_hat.v[i]) - double(eps.v[i])));
    GridF dcond = m.unet.backward(deps);

    if (m.ablation.bkrm) {
      GridF dzrec;
      const GridF* dzrec_ptr = nullptr;
      if (m.ablation.rcem) {
        out.l_bgrec += bgrec_loss(stack.z_rec, item->z0, item->cm);
        dzrec = bgrec_loss_backward(stack.z_rec, item->z0, item->cm,
                                    1.0 / double(batch.size()));
        dzrec_ptr = &dzrec;
      }
      stack.backward(dcond, dzrec_ptr);
    }
  }
  adam.step(params);
  out.l_diff /= double(batch.size());
  out.l_bgrec /= double(batch.size());
  out.total = out.l_diff + out.l_bgrec;
  return out;
}

struct LdmTrainResult {
  std::filesystem::path checkpoint_path;
  double final_total = 0;
  long steps = 0;
};

inline LdmTrainResult train_ldm(const RunConfig& cfg,
                                const DatasetManifest& manifest,
                                const std::string& ae_ckpt_path,
                                const AblationSpec& ablation,
                                const std::filesystem::path& out_dir,
                                bool resume = false, bool quiet = false) {
  DirectoryLock lock(out_dir);
  const auto t_start = std::chrono::steady_clock::now();

  VQVAE<float> ae = load_vqvae_checkpoint(ae_ckpt_path, cfg);
  const uint64_t ae_hash = file_hash(ae_ckpt_path);

  const auto train_entries = manifest.split("train");
  if (train_entries.empty()) throw DataError("no training entries in manifest");
  LoadOptions lo;
  lo.target_height = cfg.image_height;
  lo.target_width = cfg.image_width;

  // Encode everything once; the autoencoder stays frozen from here on.
  std::vector<GridF> raw_latents;
  std::vector<CamoPair> pairs;
  pairs.reserve(train_entries.size());
  for (const auto& e : train_entries) {
    pairs.push_back(load_pair(manifest, e, lo));
    raw_latents.push_back(ae.encode(pairs.back().image));
  }
  LatentStats stats = compute_latent_stats(raw_latents);
  raw_latents.clear();

  LdmModel model;
  init_ldm_model(model, cfg, ablation, ae);
  model.stats = stats;

  std::vector<PreparedItem> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs)
    items.push_back(prepare_item(cfg, ae, p, &stats, ablation.lmp));
  pairs.clear();

  const std::string ckpt_path = (out_dir / "ldm.ckpt").string();
  long start_step = 0;
  if (resume && std::filesystem::exists(ckpt_path)) {
    LdmModel loaded = load_ldm_checkpoint(ckpt_path, cfg, ae);
    if (loaded.ablation.name() != ablation.name())
      throw CheckpointError("resume ablation mismatch");
    loaded.stats = stats;
    model = std::move(loaded);
    start_step = model.step;
  }

  nn::ParamSet<float> params;
  model.unet.collect(params);
  if (ablation.bkrm) {
    model.retrieval.collect(params);
    model.fusion.collect(params);
  }
  nn::Adam<float> adam;
  adam.lr = float(cfg.lr_ldm);
  adam.init(params);

  TrainLog log(out_dir / "train_ldm.log", resume && start_step > 0);

  double final_total = 0;
  for (long step = start_step; step < cfg.ldm_steps; ++step) {
    Rng data_rng = derive_rng(cfg.seed, "ldm-data:" + std::to_string(step));
    Rng noise_rng = derive_rng(cfg.seed, "ldm-noise:" + std::to_string(step));
    std::vector<const PreparedItem*> batch;
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(&items[data_rng.uniform_int(0, int(items.size()) - 1)]);

    const LdmStepResult r = ldm_train_step(cfg, model, params, adam, batch,
                                           noise_rng);
    final_total = r.total;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.ldm_steps) {
      TrainLogRecord rec;
      rec.step = step + 1;
      rec.l_diff = r.l_diff;
      rec.l_bgrec = r.l_bgrec;
      rec.total = r.total;
      rec.wall_ms = wall_ms_since(t_start);
      log.write(rec);
    }
    if (!quiet && (step + 1) % 250 == 0)
      std::fprintf(stderr, "  [train-ldm %s] step %ld/%d l_diff=%.4f l_bgrec=%.4f\n",
                   ablation.name().c_str(), step + 1, cfg.ldm_steps, r.l_diff,
                   r.l_bgrec);
    if ((step + 1) % cfg.checkpoint_every == 0)
      save_ldm_checkpoint(model, cfg, step + 1, ae_hash, ckpt_path);
  }
  save_ldm_checkpoint(model, cfg, cfg.ldm_steps, ae_hash, ckpt_path);

  LdmTrainResult res;
  res.checkpoint_path = ckpt_path;
  res.final_total = final_total;
  res.steps = cfg.ldm_steps;
  return res;
}

// ---------------------------------------------------------------------------
// Generation.
// ---------------------------------------------------------------------------

struct GenerateOptions {
  std::filesystem::path out_dir;
  uint64_t seed = 1234;
  int sample_steps = 50;
  std::string split = "test";
  bool allow_config_mismatch = false;
  std::filesystem::path debug_dir;  // when set, dump superpixels + attention
  int limit = 0;                    // 0 = all
};

// Build the (possibly enhanced) condition for one pair; shared by training
// previews and generation.
inline GridF build_condition_features(const RunConfig& cfg, LdmModel& m,
                                      const PreparedItem& item) {
  if (!m.ablation.bkrm) return item.cf;
  ConditioningStack<float> stack;
  stack.retrieval = &m.retrieval;
  stack.fusion = &m.fusion;
  stack.eg = &m.eg;
  return stack.forward(item.cf, item.cm, item.spx).features;
}

struct GenerateResult {
  int count = 0;
  double images_per_sec = 0;
};

inline GenerateResult generate(const RunConfig& cfg,
                               const DatasetManifest& manifest,
                               const std::string& ae_ckpt_path,
                               const std::string& ldm_ckpt_path,
                               const GenerateOptions& opt) {
  VQVAE<float> ae =
      load_vqvae_checkpoint(ae_ckpt_path, cfg, opt.allow_config_mismatch);
  LdmModel model =
      load_ldm_checkpoint(ldm_ckpt_path, cfg, ae, opt.allow_config_mismatch);
  const std::string ae_hash_hex = hex64(file_hash(ae_ckpt_path));
  const std::string expected = expected_ae_hash(ldm_ckpt_path);
  if (expected != ae_hash_hex && !opt.allow_config_mismatch)
    throw CheckpointError(
        "autoencoder checkpoint does not match the one this ldm checkpoint "
        "was trained with");
  const std::string ldm_hash_hex = hex64(file_hash(ldm_ckpt_path));

  auto entries = manifest.split(opt.split);
  if (entries.empty()) throw DataError("no entries in split: " + opt.split);
  if (opt.limit > 0 && int(entries.size()) > opt.limit)
    entries.resize(size_t(opt.limit));

  std::filesystem::create_directories(opt.out_dir);
  if (!opt.debug_dir.empty()) std::filesystem::create_directories(opt.debug_dir);
  LoadOptions lo;
  lo.target_height = cfg.image_height;
  lo.target_width = cfg.image_width;

  const auto t_start = std::chrono::steady_clock::now();
  for (const auto& e : entries) {
    // Native-resolution inputs for final compositing.
    ImageU8 native_img = read_png(manifest.image_path(e.id).string());
    ImageU8 native_mask_img = read_png(manifest.mask_path(e.id).string());
    if (native_mask_img.c != 1)
      throw DataError("mask is not single-channel: " + e.id);
    Mask native_mask(native_mask_img.h, native_mask_img.w);
    for (size_t i = 0; i < native_mask.v.size(); ++i)
      native_mask.v[i] = native_mask_img.v[i] >= 128 ? 1 : 0;

    CamoPair pair = load_pair(manifest, e, lo);
    PreparedItem item = prepare_item(cfg, ae, pair, &model.stats,
                                     model.ablation.lmp);
    GridF cond = build_condition_features(cfg, model, item);

    Rng rng = derive_rng(opt.seed, "gen:" + e.id);
    GridF z = ancestral_sample<float>(
        model.schedule, opt.sample_steps, item.cm.h, item.cm.w,
        cfg.latent_channels, rng,
        [&](const GridF& zt, int t) {
          return model.unet.forward(zt, cond, item.cm, t);
        });
    unstandardize(z, model.stats);
    GridF decoded = ae.decode(z);

    // Restore to native resolution, then paste the original foreground back.
    GridF restored = (decoded.h == native_img.h && decoded.w == native_img.w)
                         ? decoded
                         : resize_bilinear(decoded, native_img.h, native_img.w);
    ImageU8 composed = composite_paste_back(native_img, to_u8(restored),
                                            native_mask);
    const std::string out_png = (opt.out_dir / (e.id + ".png")).string();
    write_png(out_png, composed);

    nlohmann::ordered_json sidecar;
    sidecar["id"] = e.id;
    sidecar["seed"] = opt.seed;
    sidecar["checkpoint"] = ldm_hash_hex;
    sidecar["ae_checkpoint"] = ae_hash_hex;
    sidecar["sample_steps"] = opt.sample_steps;
    std::ofstream side(opt.out_dir / (e.id + ".json"));
    side << sidecar.dump(2) << "\n";

    if (!opt.debug_dir.empty()) {
      // Superpixel labels as an indexed-color image.
      ImageU8 lbl(item.spx.h, item.spx.w, 3);
      for (int y = 0; y < item.spx.h; ++y)
        for (int x = 0; x < item.spx.w; ++x) {
          const int l = item.spx.label_at(y, x);
          uint64_t col = 0x202020;
          if (l >= 0) {
            uint64_t s = uint64_t(l) + 1;
            col = splitmix64(s);
          }
          lbl.at(y, x, 0) = uint8_t(col >> 16);
          lbl.at(y, x, 1) = uint8_t(col >> 8);
          lbl.at(y, x, 2) = uint8_t(col);
        }
      write_png((opt.debug_dir / (e.id + "_superpixels.png")).string(), lbl);

      if (model.ablation.bkrm) {
        ForegroundDescriptor<float> xf = localized_masked_pool(item.cf, item.spx);
        RetrievalCache<float> cache;
        bkrm_retrieve(xf.vectors, model.eg, model.retrieval, &cache);
        std::ofstream attn(opt.debug_dir / (e.id + "_attention.txt"));
        for (int h = 0; h < model.retrieval.heads; ++h) {
          attn << "# head " << h << " rows=superpixels cols=codebook\n";
          for (Eigen::Index r = 0; r < cache.attention[h].rows(); ++r) {
            for (Eigen::Index c = 0; c < cache.attention[h].cols(); ++c)
              attn << cache.attention[h](r, c) << (c + 1 < cache.attention[h].cols() ? " " : "");
            attn << "\n";
          }
        }
      }
    }
  }

  GenerateResult res;
  res.count = int(entries.size());
  const double secs = wall_ms_since(t_start) / 1000.0;
  res.images_per_sec = secs > 0 ? res.count / secs : 0;
  return res;
}

// Bitwise audit: generated outputs must equal the source exactly wherever the
// mask marks foreground.
inline bool audit_foreground_preservation(const std::filesystem::path& gen_dir,
                                          const DatasetManifest& manifest,
                                          const std::string& split,
                                          std::string* first_failure = nullptr) {
  for (const auto& e : manifest.split(split)) {
    const auto out_path = gen_dir / (e.id + ".png");
    if (!std::filesystem::exists(out_path)) continue;
    ImageU8 gen = read_png(out_path.string());
    ImageU8 src = read_png(manifest.image_path(e.id).string());
    ImageU8 mask_img = read_png(manifest.mask_path(e.id).string());
    for (int y = 0; y < src.h; ++y)
      for (int x = 0; x < src.w; ++x) {
        if (mask_img.at(y, x, 0) >= 128) continue;  // background
        for (int ch = 0; ch < src.c; ++ch)
          if (gen.at(y, x, ch) != src.at(y, x, ch)) {
            if (first_failure) *first_failure = e.id;
            return false;
          }
      }
  }
  return true;
}

}  // namespace lakered
