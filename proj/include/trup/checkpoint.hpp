#pragma once

#include <filesystem>
#include <string_view>

#include "trup/nn.hpp"
#include "trup/serialize.hpp"

namespace trup {

/// Tensor bundle on disk: `manifest.txt` listing `name:dims` for every tensor
/// and `tensors/<name>.trup` holding each one in TRUP1 format.
void save_param_set(const std::filesystem::path& dir, const ParamSet& set);

/// Overwrites, in place, every tensor of `set` whose name starts with
/// `prefix`. The manifest entries under that prefix must match the set
/// exactly (same names, same shapes), otherwise CheckpointError.
void load_param_set(const std::filesystem::path& dir, ParamSet& set, std::string_view prefix = "");

Manifest manifest_of(const ParamSet& set);

}  // namespace trup
