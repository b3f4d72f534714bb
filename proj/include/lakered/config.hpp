#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lakered/common.hpp"

namespace lakered {

// Run configuration. One flat key=value file, typed keys, unknown keys are
// hard errors. The canonical serialization below feeds the config hash that
// checkpoints are stamped with.
struct RunConfig {
  int image_height = 64;
  int image_width = 64;
  int latent_factor = 4;    // f = 2^n
  int latent_channels = 3;  // c
  int codebook_size = 512;  // K
  int embed_dim = 3;        // D
  int superpixels = 8;      // s
  double slic_compactness = 10.0;
  int slic_iterations = 10;
  int attn_heads = 4;  // H_att
  int attn_dim_k = 16;
  int attn_dim_v = 16;
  int diffusion_steps = 200;  // T
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int sample_steps = 50;
  uint64_t seed = 1234;
  double lr_vqvae = 1e-3;
  double lr_ldm = 1e-3;
  int batch_size = 8;
  int vqvae_steps = 1500;
  int ldm_steps = 1500;
  double vq_beta = 0.25;
  bool vq_ema = false;
  double vq_ema_decay = 0.99;
  int vqvae_width = 16;
  int unet_width = 32;
  int kid_block_size = 50;
  int log_every = 10;
  int checkpoint_every = 500;

  int latent_height() const { return image_height / latent_factor; }
  int latent_width() const { return image_width / latent_factor; }
};

namespace detail {

enum class KeyType { Int, Double, Bool, U64 };

struct KeyDesc {
  KeyType type;
  void* (*field)(RunConfig&);
};

inline const std::map<std::string, KeyDesc>& config_keys() {
  static const std::map<std::string, KeyDesc> keys = {
#define LK_KEY(name, type) \
  {#name, {KeyType::type, [](RunConfig& c) -> void* { return &c.name; }}}
      LK_KEY(image_height, Int),
      LK_KEY(image_width, Int),
      LK_KEY(latent_factor, Int),
      LK_KEY(latent_channels, Int),
      LK_KEY(codebook_size, Int),
      LK_KEY(embed_dim, Int),
      LK_KEY(superpixels, Int),
      LK_KEY(slic_compactness, Double),
      LK_KEY(slic_iterations, Int),
      LK_KEY(attn_heads, Int),
      LK_KEY(attn_dim_k, Int),
      LK_KEY(attn_dim_v, Int),
      LK_KEY(diffusion_steps, Int),
      LK_KEY(beta_start, Double),
      LK_KEY(beta_end, Double),
      LK_KEY(sample_steps, Int),
      LK_KEY(seed, U64),
      LK_KEY(lr_vqvae, Double),
      LK_KEY(lr_ldm, Double),
      LK_KEY(batch_size, Int),
      LK_KEY(vqvae_steps, Int),
      LK_KEY(ldm_steps, Int),
      LK_KEY(vq_beta, Double),
      LK_KEY(vq_ema, Bool),
      LK_KEY(vq_ema_decay, Double),
      LK_KEY(vqvae_width, Int),
      LK_KEY(unet_width, Int),
      LK_KEY(kid_block_size, Int),
      LK_KEY(log_every, Int),
      LK_KEY(checkpoint_every, Int),
#undef LK_KEY
  };
  return keys;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::string format_value(const RunConfig& cfg, const std::string& name) {
  auto& desc = config_keys().at(name);
  void* f = desc.field(const_cast<RunConfig&>(cfg));
  char buf[64];
  switch (desc.type) {
    case KeyType::Int:
      return std::to_string(*static_cast<int*>(f));
    case KeyType::U64:
      return std::to_string(*static_cast<uint64_t*>(f));
    case KeyType::Bool:
      return *static_cast<bool*>(f) ? "true" : "false";
    case KeyType::Double:
      std::snprintf(buf, sizeof buf, "%.17g", *static_cast<double*>(f));
      return buf;
  }
  return "";
}

inline void parse_value(RunConfig& cfg, const std::string& name,
                        const std::string& value) {
  auto& desc = config_keys().at(name);
  void* f = desc.field(cfg);
  try {
    switch (desc.type) {
      case KeyType::Int:
        *static_cast<int*>(f) = std::stoi(value);
        break;
      case KeyType::U64:
        *static_cast<uint64_t*>(f) = std::stoull(value);
        break;
      case KeyType::Double:
        *static_cast<double*>(f) = std::stod(value);
        break;
      case KeyType::Bool:
        if (value == "true" || value == "1")
          *static_cast<bool*>(f) = true;
        else if (value == "false" || value == "0")
          *static_cast<bool*>(f) = false;
        else
          throw ConfigError("bad boolean for key '" + name + "': " + value);
        break;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value for key '" + name + "': " + value);
  }
}

}  // namespace detail

inline void validate_config(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  int f = c.latent_factor;
  if (f < 2 || (f & (f - 1)) != 0) fail("latent_factor must be 2^n with n >= 1");
  if (c.image_height <= 0 || c.image_width <= 0) fail("image size must be positive");
  if (c.image_height % f != 0 || c.image_width % f != 0)
    fail("image size must be divisible by latent_factor");
  if (c.latent_channels != 3) fail("latent_channels must be 3");
  if (c.embed_dim != c.latent_channels)
    fail("embed_dim must equal latent_channels");
  if (c.codebook_size < 2) fail("codebook_size must be >= 2");
  if (c.superpixels < 1) fail("superpixels must be >= 1");
  if (c.slic_iterations < 1) fail("slic_iterations must be >= 1");
  if (c.attn_heads < 1) fail("attn_heads must be >= 1");
  if (c.attn_dim_k < 1 || c.attn_dim_v < 1) fail("attention dims must be >= 1");
  if (c.diffusion_steps < 1) fail("diffusion_steps must be >= 1");
  if (!(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0))
    fail("require 0 < beta_start <= beta_end < 1");
  if (c.sample_steps < 1 || c.sample_steps > c.diffusion_steps)
    fail("sample_steps must be in [1, diffusion_steps]");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.vqvae_steps < 1 || c.ldm_steps < 1) fail("step budgets must be >= 1");
  if (c.lr_vqvae <= 0.0 || c.lr_ldm <= 0.0) fail("learning rates must be > 0");
  if (!(c.vq_beta >= 0.0)) fail("vq_beta must be >= 0");
  if (!(c.vq_ema_decay > 0.0 && c.vq_ema_decay < 1.0))
    fail("vq_ema_decay must be in (0,1)");
  if (c.vqvae_width < 1 || c.unet_width < 1) fail("widths must be >= 1");
  if (c.kid_block_size < 2) fail("kid_block_size must be >= 2");
  if (c.log_every < 1 || c.checkpoint_every < 1)
    fail("log/checkpoint intervals must be >= 1");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, bool> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (!detail::config_keys().count(key))
      throw ConfigError("unknown config key '" + key + "' (line " +
                        std::to_string(lineno) + ")");
    if (seen[key])
      throw ConfigError("duplicate config key '" + key + "' (line " +
                        std::to_string(lineno) + ")");
    seen[key] = true;
    detail::parse_value(cfg, key, value);
  }
  validate_config(cfg);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical text: every key in sorted order with normalized value formatting.
inline std::string canonical_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, desc] : detail::config_keys()) {
    (void)desc;
    out += name;
    out += " = ";
    out += detail::format_value(cfg, name);
    out += "\n";
  }
  return out;
}

inline uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a64(canonical_config_text(cfg));
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file: " + path);
  out << canonical_config_text(cfg);
}

}  // namespace lakered
