#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "geopix/predictor.hpp"

// Checkpoint = `<stem>.json` manifest + `<stem>.bin` flat little-endian f32
// blob. Entries are laid out back to back in visit order.

namespace geopix::checkpoint {

inline constexpr int kVersion = 1;

struct Entry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes
  std::size_t bytes = 0;
};

struct Manifest {
  int version = kVersion;
  std::string config_hash;
  ModelConfig config;
  std::vector<Entry> entries;
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"bytes", e.bytes}});
  return {{"version", m.version}, {"config_hash", m.config_hash}, {"config", m.config}, {"entries", entries}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(m.version));
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config").get<ModelConfig>();
    std::size_t expect = 0;
    for (const auto& je : j.at("entries")) {
      Entry e{je.at("name").get<std::string>(), je.at("shape").get<Shape>(), je.at("offset").get<std::size_t>(),
              je.at("bytes").get<std::size_t>()};
      if (e.offset != expect) throw DataError("checkpoint: entry '" + e.name + "' is not contiguous");
      if (e.shape.empty() || shape_numel(e.shape) * sizeof(float) != e.bytes)
        throw DataError("checkpoint: entry '" + e.name + "' shape does not match its byte length");
      expect += e.bytes;
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
}

inline std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".json");
}
inline std::filesystem::path blob_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".bin");
}

template <typename T>
void save(const Model<T>& model, const std::filesystem::path& stem) {
  static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  Manifest m;
  m.config = model.config();
  m.config_hash = config_hash(m.config);
  std::vector<float> blob;
  model.visit([&](const Parameter<T>& p) {
    Entry e{p.name, p.value.shape(), blob.size() * sizeof(float), p.value.numel() * sizeof(float)};
    for (T v : p.value.values()) blob.push_back(static_cast<float>(v));
    m.entries.push_back(std::move(e));
  });
  {
    std::ofstream f(manifest_path(stem), std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot write " + manifest_path(stem).string());
    f << to_json(m).dump(2) << '\n';
  }
  std::ofstream f(blob_path(stem), std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot write " + blob_path(stem).string());
  f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!f) throw DataError("checkpoint: short write to " + blob_path(stem).string());
}

inline Manifest read_manifest(const std::filesystem::path& stem) {
  std::ifstream f(manifest_path(stem));
  if (!f) throw DataError("checkpoint: cannot open " + manifest_path(stem).string());
  try {
    return manifest_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
}

/// Loads parameters into `model`; its config must hash to the manifest's.
template <typename T>
void load_into(Model<T>& model, const std::filesystem::path& stem) {
  const Manifest m = read_manifest(stem);
  const std::string want = config_hash(model.config());
  if (m.config_hash != want)
    throw ConfigError("checkpoint: config hash mismatch (checkpoint " + m.config_hash + ", loading config " + want + ")");
  std::ifstream f(blob_path(stem), std::ios::binary | std::ios::ate);
  if (!f) throw DataError("checkpoint: cannot open " + blob_path(stem).string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  const std::size_t need = m.entries.empty() ? 0 : m.entries.back().offset + m.entries.back().bytes;
  if (bytes != need)
    throw DataError("checkpoint: blob holds " + std::to_string(bytes) + " bytes, manifest needs " + std::to_string(need));
  std::vector<float> blob(bytes / sizeof(float));
  f.seekg(0);
  f.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : m.entries) by_name[e.name] = &e;
  std::size_t seen = 0;
  model.visit([&](Parameter<T>& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter '" + p.name + "'");
    const Entry& e = *it->second;
    if (e.shape != p.value.shape())
      throw DataError("checkpoint: '" + p.name + "' has shape " + shape_str(e.shape) + ", model expects " +
                      shape_str(p.value.shape()));
    const float* src = blob.data() + e.offset / sizeof(float);
    for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] = static_cast<T>(src[i]);
    ++seen;
  });
  if (seen != m.entries.size()) throw DataError("checkpoint: manifest has entries the model does not use");
}

/// Builds a model from the manifest's embedded config and loads it.
template <typename T = float>
Model<T> load(const std::filesystem::path& stem) {
  const Manifest m = read_manifest(stem);
  Model<T> model(m.config, 0);
  load_into(model, stem);
  return model;
}

}  // namespace geopix::checkpoint
