#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "trup/tensor.hpp"

namespace trup {

// TRUP1 tensor file: "TRUP", version byte 0x01, u32 LE rank, rank x u32 LE
// dims, then product(dims) float32 LE values.

void write_trup(std::ostream& os, const Tensor& t);
Tensor read_trup(std::istream& is);
void write_trup(const std::filesystem::path& path, const Tensor& t);
Tensor read_trup(const std::filesystem::path& path);

struct ManifestEntry {
  std::string name;
  Shape shape;
};
using Manifest = std::vector<ManifestEntry>;

/// One `name:d1,d2,...` line per entry.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

/// Plain-text `key=value` files (model config, optimizer state, FPS stats).
using KeyValues = std::map<std::string, std::string>;
void write_key_values(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& kv);
KeyValues read_key_values(const std::filesystem::path& path);

const std::string& require_key(const KeyValues& kv, const std::string& key);

}  // namespace trup
