#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tloc/cells.hpp"
#include "tloc/model.hpp"
#include "tloc/synth.hpp"
#include "tloc/train.hpp"

namespace tloc::config {

/// Every module's settings, read from one `key=value` document. Blank lines
/// and lines starting with '#' are ignored.
struct RunConfig {
  data::WorldSpec world;
  // Strength of the appearance shift applied to build the robustness split.
  double shift_strength = -0.4;
  cells::IndexParams cells;
  model::ModelConfig model;
  // Hidden widths of the middle and fine heads follow the class counts.
  bool auto_hidden = true;
  train::OptimConfig optim;
  train::AugmentConfig augment;
  bool augment_enabled = true;
  train::LossWeights loss;
  std::uint64_t train_seed = 0;
  // Empty: the standard five radii plus the same radii scaled to the world.
  std::vector<double> thresholds_km;
  bool tencrop = false;
  std::size_t eval_batch = 64;
};

/// Keys that have no default.
inline constexpr std::string_view kRequiredKeys[] = {"world.seed", "train.seed"};

/// Throws ConfigError naming the line for syntax errors, unknown or repeated
/// keys and bad values, and naming the key when a required one is missing.
RunConfig parse(std::string_view text);
/// Throws IoError when the file cannot be read.
RunConfig load(const std::string& path);

/// Every recognized key, in documentation order.
std::vector<std::string> known_keys();

}  // namespace tloc::config
