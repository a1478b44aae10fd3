#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stochca/vit.hpp"

namespace stochca {

using json = nlohmann::ordered_json;

inline constexpr int kContainerVersion = 1;

namespace detail {

inline void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::string hex(const unsigned char* p, std::size_t n) {
  std::ostringstream os;
  for (std::size_t i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(p[i]);
  return os.str();
}

}  // namespace detail

/// SHA-256 of a byte string, lowercase hex.
inline std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw std::runtime_error("sha256: digest failed");
  return detail::hex(digest, len);
}

/// Hash over names, shapes and exact bit patterns of the given parameters.
inline std::string parameter_hash(const std::vector<const Parameter*>& params) {
  std::string buf;
  for (const Parameter* p : params) {
    buf += p->name;
    buf.push_back('\0');
    buf += shape_str(p->value.shape());
    for (double v : p->value.values()) detail::append_le(buf, v);
  }
  return sha256_hex(buf);
}

inline std::string parameter_hash(const ViTModel& m) { return parameter_hash(m.parameters()); }

/// Hash of everything except the classifier head.
inline std::string feature_extractor_hash(const ViTModel& m) {
  auto ps = m.parameters();
  std::erase_if(ps, [&](const Parameter* p) { return p == &m.head_w || p == &m.head_b; });
  return parameter_hash(ps);
}

/**
 * Manifest + blob container: `<stem>.json` lists named tensors with shapes
 * and byte offsets into `<stem>.bin`, a little-endian float64 blob.
 */
struct NamedTensor {
  std::string name;
  Tensor value;
};

inline void write_container(const std::filesystem::path& manifest_path, const std::string& format,
                            const std::vector<NamedTensor>& tensors, json extra = json::object()) {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  std::string blob;
  json entries = json::array();
  for (const auto& [name, value] : tensors) {
    entries.push_back({{"name", name}, {"shape", value.shape()}, {"offset", blob.size()}, {"count", value.size()}});
    for (double v : value.values()) detail::append_le(blob, v);
  }
  json manifest;
  manifest["format"] = format;
  manifest["version"] = kContainerVersion;
  manifest["blob"] = blob_path.filename().string();
  manifest["blob_bytes"] = blob.size();
  manifest["blob_sha256"] = sha256_hex(blob);
  for (auto& [k, v] : extra.items()) manifest[k] = v;
  manifest["tensors"] = std::move(entries);

  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  std::ofstream bout(blob_path, std::ios::binary);
  bout.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bout) throw std::runtime_error("cannot write " + blob_path.string());
  std::ofstream mout(manifest_path);
  mout << manifest.dump(2) << '\n';
  if (!mout) throw std::runtime_error("cannot write " + manifest_path.string());
}

struct Container {
  json manifest;
  std::vector<NamedTensor> tensors;
};

inline Container read_container(const std::filesystem::path& manifest_path, const std::string& format) {
  std::ifstream min(manifest_path);
  if (!min) throw ConfigError("missing file " + manifest_path.string());
  Container c;
  try {
    c.manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw CorruptionError(manifest_path.string() + ": unreadable manifest: " + e.what());
  }
  const json& m = c.manifest;
  try {
    if (m.at("format").get<std::string>() != format)
      throw CorruptionError(manifest_path.string() + ": format '" + m.at("format").get<std::string>() + "', expected '" +
                            format + "'");
    if (m.at("version").get<int>() != kContainerVersion)
      throw CorruptionError(manifest_path.string() + ": unsupported version " + m.at("version").dump());
    const auto blob_path = manifest_path.parent_path() / m.at("blob").get<std::string>();
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) throw CorruptionError("missing blob " + blob_path.string());
    std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (blob.size() != m.at("blob_bytes").get<std::size_t>())
      throw CorruptionError(blob_path.string() + ": " + std::to_string(blob.size()) + " bytes, manifest says " +
                            m.at("blob_bytes").dump());
    if (sha256_hex(blob) != m.at("blob_sha256").get<std::string>())
      throw CorruptionError(blob_path.string() + ": checksum mismatch");
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    for (const json& e : m.at("tensors")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (shape_size(shape) != count || offset % 8 != 0 || offset + 8 * count > blob.size())
        throw CorruptionError(manifest_path.string() + ": tensor '" + e.at("name").get<std::string>() +
                              "' has inconsistent shape/offset");
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) values[i] = detail::read_le(bytes + offset + 8 * i);
      c.tensors.push_back({e.at("name").get<std::string>(), Tensor(shape, std::move(values))});
    }
  } catch (const json::exception& e) {
    throw CorruptionError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  return c;
}

inline json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
          {"depth", c.depth},           {"dim", c.dim},               {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"init_scale", c.init_scale},
          {"ln_eps", c.ln_eps}};
}

inline constexpr const char* kCheckpointFormat = "stochca-vit-checkpoint";

inline void save_checkpoint(const ViTModel& m, const std::filesystem::path& manifest_path) {
  std::vector<NamedTensor> tensors;
  for (const Parameter* p : m.parameters()) tensors.push_back({p->name, p->value});
  write_container(manifest_path, kCheckpointFormat, tensors,
                  {{"config", to_json(m.config)}, {"parameter_sha256", parameter_hash(m)}});
}

/// Loads a checkpoint; the model is only returned when every tensor checks out.
inline ViTModel load_checkpoint(const std::filesystem::path& manifest_path) {
  Container c = read_container(manifest_path, kCheckpointFormat);
  ViTConfig cfg;
  try {
    const json& j = c.manifest.at("config");
    cfg.image_size = j.at("image_size");
    cfg.patch_size = j.at("patch_size");
    cfg.channels = j.at("channels");
    cfg.depth = j.at("depth");
    cfg.dim = j.at("dim");
    cfg.heads = j.at("heads");
    cfg.mlp_ratio = j.at("mlp_ratio");
    cfg.num_classes = j.at("num_classes");
    cfg.init_scale = j.at("init_scale");
    cfg.ln_eps = j.at("ln_eps");
    cfg.validate();
  } catch (const json::exception& e) {
    throw CorruptionError(manifest_path.string() + ": bad config: " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(manifest_path.string() + ": bad config: " + e.what());
  }
  ViTModel m = ViTModel::create(cfg, 0);
  auto params = m.parameters();
  if (params.size() != c.tensors.size())
    throw CorruptionError(manifest_path.string() + ": " + std::to_string(c.tensors.size()) + " tensors, expected " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != c.tensors[i].name || params[i]->value.shape() != c.tensors[i].value.shape())
      throw CorruptionError(manifest_path.string() + ": tensor '" + c.tensors[i].name + "' " +
                            shape_str(c.tensors[i].value.shape()) + " does not match expected '" + params[i]->name +
                            "' " + shape_str(params[i]->value.shape()));
    params[i]->value = std::move(c.tensors[i].value);
  }
  if (c.manifest.contains("parameter_sha256") && c.manifest["parameter_sha256"] != parameter_hash(m))
    throw CorruptionError(manifest_path.string() + ": parameter hash mismatch");
  return m;
}

}  // namespace stochca
