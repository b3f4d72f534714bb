#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lakered/common.hpp"
#include "lakered/nn.hpp"

namespace lakered {

// Versioned container of named float tensors plus string metadata. Entries
// keep insertion order so that save -> load -> save reproduces the file
// byte for byte.
struct Checkpoint {
  static constexpr char kMagic[8] = {'L', 'K', 'R', 'D', 'C', 'K', 'P', '1'};
  static constexpr uint32_t kVersion = 1;

  uint64_t config_hash = 0;
  uint64_t step = 0;
  std::vector<std::pair<std::string, std::string>> meta;

  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
  };
  std::vector<Entry> tensors;

  void set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta)
      if (k == key) {
        v = value;
        return;
      }
    meta.emplace_back(key, value);
  }
  std::optional<std::string> get_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    return std::nullopt;
  }

  void add_tensor(const std::string& name, std::vector<int> shape,
                  std::vector<float> data) {
    tensors.push_back({name, std::move(shape), std::move(data)});
  }
  const Entry* find(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return &e;
    return nullptr;
  }

  void add_params(const nn::ParamSet<float>& ps) {
    for (const auto* p : ps.items) add_tensor(p->name, p->shape, p->w);
  }

  void load_params(nn::ParamSet<float>& ps) const {
    for (auto* p : ps.items) {
      const Entry* e = find(p->name);
      if (!e) throw CheckpointError("checkpoint missing tensor: " + p->name);
      if (e->shape != p->shape || e->data.size() != p->w.size())
        throw CheckpointError("checkpoint shape mismatch for: " + p->name);
      p->w = e->data;
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path);
    auto put_u32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&](uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    auto put_str = [&](const std::string& s) {
      put_u32(uint32_t(s.size()));
      out.write(s.data(), std::streamsize(s.size()));
    };
    out.write(kMagic, 8);
    put_u32(kVersion);
    put_u64(config_hash);
    put_u64(step);
    put_u32(uint32_t(meta.size()));
    for (const auto& [k, v] : meta) {
      put_str(k);
      put_str(v);
    }
    put_u32(uint32_t(tensors.size()));
    for (const auto& e : tensors) {
      put_str(e.name);
      put_u32(uint32_t(e.shape.size()));
      for (int d : e.shape) put_u32(uint32_t(d));
      put_u64(e.data.size());
      out.write(reinterpret_cast<const char*>(e.data.data()),
                std::streamsize(e.data.size() * sizeof(float)));
    }
    if (!out) throw CheckpointError("short write for checkpoint: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    auto get_u32 = [&]() {
      uint32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 4);
      return v;
    };
    auto get_u64 = [&]() {
      uint64_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 8);
      return v;
    };
    auto get_str = [&]() {
      uint32_t n = get_u32();
      std::string s(n, '\0');
      in.read(s.data(), n);
      return s;
    };
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
      throw CheckpointError("not a checkpoint file: " + path);
    if (get_u32() != kVersion)
      throw CheckpointError("unsupported checkpoint version: " + path);
    Checkpoint ck;
    ck.config_hash = get_u64();
    ck.step = get_u64();
    const uint32_t n_meta = get_u32();
    for (uint32_t i = 0; i < n_meta; ++i) {
      std::string k = get_str();
      std::string v = get_str();
      ck.meta.emplace_back(std::move(k), std::move(v));
    }
    const uint32_t n_tensors = get_u32();
    for (uint32_t i = 0; i < n_tensors; ++i) {
      Entry e;
      e.name = get_str();
      const uint32_t ndims = get_u32();
      e.shape.resize(ndims);
      for (auto& d : e.shape) d = int(get_u32());
      const uint64_t count = get_u64();
      e.data.resize(count);
      in.read(reinterpret_cast<char*>(e.data.data()),
              std::streamsize(count * sizeof(float)));
      ck.tensors.push_back(std::move(e));
    }
    if (!in) throw CheckpointError("truncated checkpoint: " + path);
    return ck;
  }
};

inline uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open file for hashing: " + path);
  uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a64(buf, size_t(in.gcount()), h);
  }
  return h;
}

}  // namespace lakered
