#include "tloc/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tloc/error.hpp"

namespace tloc::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_real(std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument("expected a number, got '" + std::string(v) + "'");
  return out;
}

std::uint64_t parse_uint(std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw std::invalid_argument("expected a nonnegative integer, got '" + std::string(v) + "'");
  }
  return out;
}

std::int64_t parse_int(std::string_view v) {
  std::int64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument("expected an integer, got '" + std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "on" || v == "true") return true;
  if (v == "off" || v == "false") return false;
  throw std::invalid_argument("expected on or off, got '" + std::string(v) + "'");
}

std::vector<double> parse_list(std::string_view v) {
  std::vector<double> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_real(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
  return out;
}

using Setter = std::function<void(RunConfig&, std::string_view)>;

template <typename T>
Setter size_field(T RunConfig::*section, std::size_t T::*field) {
  return [=](RunConfig& c, std::string_view v) { c.*section.*field = parse_uint(v); };
}
template <typename T>
Setter real_field(T RunConfig::*section, double T::*field) {
  return [=](RunConfig& c, std::string_view v) { c.*section.*field = parse_real(v); };
}
template <typename T>
Setter bool_field(T RunConfig::*section, bool T::*field) {
  return [=](RunConfig& c, std::string_view v) { c.*section.*field = parse_bool(v); };
}
template <typename T>
Setter int_field(T RunConfig::*section, std::int64_t T::*field) {
  return [=](RunConfig& c, std::string_view v) { c.*section.*field = parse_int(v); };
}

const std::vector<std::pair<std::string, Setter>>& table() {
  using data::WorldSpec;
  using model::ModelConfig;
  using train::AugmentConfig;
  using train::OptimConfig;
  static const std::vector<std::pair<std::string, Setter>> t = {
      {"world.seed", [](RunConfig& c, std::string_view v) { c.world.seed = parse_uint(v); }},
      {"world.locations", size_field(&RunConfig::world, &WorldSpec::n_locations)},
      {"world.clusters", size_field(&RunConfig::world, &WorldSpec::n_clusters)},
      {"world.samples_per_location", size_field(&RunConfig::world, &WorldSpec::samples_per_location)},
      {"world.image_h", size_field(&RunConfig::world, &WorldSpec::image_h)},
      {"world.image_w", size_field(&RunConfig::world, &WorldSpec::image_w)},
      {"world.seg_classes", size_field(&RunConfig::world, &WorldSpec::n_seg_classes)},
      {"world.scene_classes", size_field(&RunConfig::world, &WorldSpec::n_scene_classes)},
      {"world.perturbation", real_field(&RunConfig::world, &WorldSpec::perturbation)},
      {"world.pixel_noise", real_field(&RunConfig::world, &WorldSpec::pixel_noise)},
      {"world.layout_grid", size_field(&RunConfig::world, &WorldSpec::layout_grid)},
      {"world.min_layout_distance", size_field(&RunConfig::world, &WorldSpec::min_layout_distance)},
      {"world.cluster_radius_km", real_field(&RunConfig::world, &WorldSpec::cluster_radius_km)},
      {"world.min_location_separation_km", real_field(&RunConfig::world, &WorldSpec::min_location_separation_km)},
      {"world.min_cluster_separation_km", real_field(&RunConfig::world, &WorldSpec::min_cluster_separation_km)},
      {"world.gps_noise_km", real_field(&RunConfig::world, &WorldSpec::gps_noise_km)},
      {"world.val", size_field(&RunConfig::world, &WorldSpec::n_val)},
      {"world.test", size_field(&RunConfig::world, &WorldSpec::n_test)},
      {"world.shift_strength", [](RunConfig& c, std::string_view v) { c.shift_strength = parse_real(v); }},

      {"cells.min_images", int_field(&RunConfig::cells, &cells::IndexParams::min_images)},
      {"cells.max_coarse", int_field(&RunConfig::cells, &cells::IndexParams::max_coarse)},
      {"cells.max_middle", int_field(&RunConfig::cells, &cells::IndexParams::max_middle)},
      {"cells.max_fine", int_field(&RunConfig::cells, &cells::IndexParams::max_fine)},
      {"cells.max_depth", [](RunConfig& c, std::string_view v) { c.cells.max_depth = static_cast<int>(parse_int(v)); }},

      {"model.patch", size_field(&RunConfig::model, &ModelConfig::patch)},
      {"model.embed_dim", size_field(&RunConfig::model, &ModelConfig::embed_dim)},
      {"model.depth", size_field(&RunConfig::model, &ModelConfig::depth)},
      {"model.heads", size_field(&RunConfig::model, &ModelConfig::heads)},
      {"model.ffn_dim", size_field(&RunConfig::model, &ModelConfig::ffn_dim)},
      {"model.seg_embed_dim", size_field(&RunConfig::model, &ModelConfig::seg_embed_dim)},
      {"model.branches", [](RunConfig& c, std::string_view v) { c.model.branches = model::parse_branches(v); }},
      {"model.mff", bool_field(&RunConfig::model, &ModelConfig::mff)},
      {"model.attentive_fusion", bool_field(&RunConfig::model, &ModelConfig::attentive_fusion)},
      {"model.scene_head", bool_field(&RunConfig::model, &ModelConfig::scene_head)},
      {"model.scorer_hidden", size_field(&RunConfig::model, &ModelConfig::scorer_hidden)},
      {"model.head_hidden",
       [](RunConfig& c, std::string_view v) {
         if (v == "auto") {
           c.auto_hidden = true;
           return;
         }
         const auto list = parse_list(v);
         if (list.size() != 2) throw std::invalid_argument("expected 'auto' or two widths 'middle,fine'");
         for (double x : list) {
           if (x < 1.0 || x != static_cast<double>(static_cast<std::size_t>(x))) {
             throw std::invalid_argument("head widths must be positive integers");
           }
         }
         c.auto_hidden = false;
         c.model.hidden_middle = static_cast<std::size_t>(list[0]);
         c.model.hidden_fine = static_cast<std::size_t>(list[1]);
       }},

      {"train.seed", [](RunConfig& c, std::string_view v) { c.train_seed = parse_uint(v); }},
      {"train.epochs", size_field(&RunConfig::optim, &OptimConfig::epochs)},
      {"train.warmup_epochs", size_field(&RunConfig::optim, &OptimConfig::warmup_epochs)},
      {"train.batch_size", size_field(&RunConfig::optim, &OptimConfig::batch_size)},
      {"train.base_lr", real_field(&RunConfig::optim, &OptimConfig::base_lr)},
      {"train.momentum", real_field(&RunConfig::optim, &OptimConfig::momentum)},
      {"train.beta2", real_field(&RunConfig::optim, &OptimConfig::beta2)},
      {"train.eps", real_field(&RunConfig::optim, &OptimConfig::eps)},
      {"train.weight_decay", real_field(&RunConfig::optim, &OptimConfig::weight_decay)},
      {"train.alpha", real_field(&RunConfig::loss, &train::LossWeights::alpha)},
      {"train.beta", real_field(&RunConfig::loss, &train::LossWeights::beta)},
      {"train.gamma", real_field(&RunConfig::loss, &train::LossWeights::gamma)},
      {"train.augment", [](RunConfig& c, std::string_view v) { c.augment_enabled = parse_bool(v); }},
      {"train.flip_prob", real_field(&RunConfig::augment, &AugmentConfig::flip_prob)},
      {"train.jitter_prob", real_field(&RunConfig::augment, &AugmentConfig::jitter_prob)},
      {"train.brightness", real_field(&RunConfig::augment, &AugmentConfig::brightness)},
      {"train.contrast", real_field(&RunConfig::augment, &AugmentConfig::contrast)},
      {"train.saturation", real_field(&RunConfig::augment, &AugmentConfig::saturation)},
      {"train.hue", real_field(&RunConfig::augment, &AugmentConfig::hue)},

      {"eval.thresholds_km", [](RunConfig& c, std::string_view v) { c.thresholds_km = parse_list(v); }},
      {"eval.tencrop", [](RunConfig& c, std::string_view v) { c.tencrop = parse_bool(v); }},
      {"eval.batch_size", [](RunConfig& c, std::string_view v) { c.eval_batch = parse_uint(v); }},
  };
  return t;
}

void validate(RunConfig& c) {
  c.world.validate();
  c.cells.validate();
  c.optim.validate();
  c.augment.validate();
  c.loss.validate();
  if (c.eval_batch == 0) throw std::invalid_argument("eval.batch_size must be positive");
  for (std::size_t i = 0; i < c.thresholds_km.size(); ++i) {
    if (!(c.thresholds_km[i] > 0.0) || (i > 0 && !(c.thresholds_km[i] > c.thresholds_km[i - 1]))) {
      throw std::invalid_argument("eval.thresholds_km must be positive and strictly increasing");
    }
  }
  // Head sizes are not known yet; check the trunk with placeholder counts.
  model::ModelConfig m = c.model;
  m.image_h = c.world.image_h;
  m.image_w = c.world.image_w;
  m.seg_classes = c.world.n_seg_classes;
  m.k_scene = c.world.n_scene_classes;
  if (!m.dual()) {
    m.mff = false;
    m.attentive_fusion = false;
  }
  m.validate();
  c.model.image_h = m.image_h;
  c.model.image_w = m.image_w;
  c.model.seg_classes = m.seg_classes;
  c.model.k_scene = m.k_scene;
}

}  // namespace

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : table()) out.push_back(k);
  return out;
}

RunConfig parse(std::string_view text) {
  RunConfig c;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    const std::string_view raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto& t = table();
    const auto it = std::find_if(t.begin(), t.end(), [&](const auto& e) { return e.first == key; });
    if (it == t.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
    try {
      it->second(c, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  for (std::string_view k : kRequiredKeys) {
    if (!seen.contains(std::string(k))) throw ConfigError("missing required key '" + std::string(k) + "'");
  }
  try {
    validate(c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  return c;
}

RunConfig load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace tloc::config
