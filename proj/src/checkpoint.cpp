#include "trup/checkpoint.hpp"

#include <algorithm>
#include <map>

namespace trup {

namespace fs = std::filesystem;

namespace {

template <typename Fn>
void for_each_tensor(const ParamSet& set, Fn&& fn) {
  for (const auto& nt : set.params) fn(nt);
  for (const auto& nt : set.buffers) fn(nt);
}

}  // namespace

Manifest manifest_of(const ParamSet& set) {
  Manifest m;
  for_each_tensor(set, [&](const NamedTensor& nt) { m.push_back({nt.name, nt.tensor.shape()}); });
  return m;
}

void save_param_set(const fs::path& dir, const ParamSet& set) {
  fs::create_directories(dir / "tensors");
  write_manifest(dir / "manifest.txt", manifest_of(set));
  for_each_tensor(set, [&](const NamedTensor& nt) { write_trup(dir / "tensors" / (nt.name + ".trup"), nt.tensor); });
}

void load_param_set(const fs::path& dir, ParamSet& set, std::string_view prefix) {
  auto under_prefix = [&](const std::string& name) { return name.compare(0, prefix.size(), prefix) == 0; };
  Manifest manifest;
  try {
    manifest = read_manifest(dir / "manifest.txt");
  } catch (const FormatError& e) {
    throw CheckpointError(e.what());
  }
  std::map<std::string, Shape> stored;
  for (const auto& e : manifest) {
    if (under_prefix(e.name)) stored[e.name] = e.shape;
  }
  std::size_t matched = 0;
  auto load_one = [&](const NamedTensor& nt) {
    if (!under_prefix(nt.name)) return;
    auto it = stored.find(nt.name);
    if (it == stored.end()) throw CheckpointError("checkpoint has no tensor '" + nt.name + "'");
    if (it->second != nt.tensor.shape()) {
      throw CheckpointError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(it->second) + ", model expects " +
                            shape_str(nt.tensor.shape()));
    }
    Tensor loaded;
    try {
      loaded = read_trup(dir / "tensors" / (nt.name + ".trup"));
    } catch (const FormatError& e) {
      throw CheckpointError(e.what());
    }
    if (loaded.shape() != nt.tensor.shape()) throw CheckpointError("tensor file for '" + nt.name + "' disagrees with manifest");
    Tensor target = nt.tensor;
    std::ranges::copy(loaded.data(), target.mutable_data().begin());
    ++matched;
  };
  for (const auto& nt : set.params) load_one(nt);
  for (const auto& nt : set.buffers) load_one(nt);
  if (matched != stored.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(stored.size()) + " tensors under '" + std::string(prefix) +
                          "', model has " + std::to_string(matched));
  }
}

}  // namespace trup
