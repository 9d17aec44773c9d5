#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tloc/geo.hpp"

namespace tloc::data {

/// One training/evaluation record. rgb is [3 × H × W] in [0, 1]; seg is
/// [H × W] class ids.
struct Sample {
  std::vector<float> rgb;
  std::vector<std::uint8_t> seg;
  geo::GeoCoord coord;
  std::uint16_t scene = 0;
};

struct Dataset {
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  std::uint32_t n_seg_classes = 0;
  std::uint32_t n_scene_classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<geo::GeoCoord> coords() const;
};

/// Parameters of the synthetic world.
struct WorldSpec {
  std::uint64_t seed = 0;
  std::size_t n_locations = 16;
  std::size_t n_clusters = 4;
  std::size_t samples_per_location = 150;
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t n_seg_classes = 8;
  std::size_t n_scene_classes = 3;
  // Per-sample brightness and contrast factors are drawn from [1 - p, 1 + p].
  double perturbation = 0.2;
  double pixel_noise = 0.03;
  // Layouts are grid × grid mosaics of segmentation classes.
  std::size_t layout_grid = 4;
  // Minimum number of differing layout blocks between any two locations.
  std::size_t min_layout_distance = 4;
  double cluster_radius_km = 300.0;
  double min_location_separation_km = 60.0;
  double min_cluster_separation_km = 2000.0;
  double gps_noise_km = 0.05;
  std::size_t n_val = 200;
  std::size_t n_test = 200;

  void validate() const;
};

struct Location {
  geo::GeoCoord center;
  std::vector<std::uint8_t> layout;  // layout_grid²
  std::vector<float> palette;        // n_seg_classes × 3
  std::uint16_t scene = 0;
  std::size_t cluster = 0;
};

struct World {
  std::vector<Location> locations;
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Deterministic under spec.seed. Samples of all locations are shuffled once
/// and split into train / val / test.
World generate_world(const WorldSpec& spec);

/// Segmentation map of a location at image resolution.
std::vector<std::uint8_t> render_layout(const Location& loc, std::size_t h, std::size_t w, std::size_t grid);

/// Global brightness/contrast change on RGB only:
/// rgb' = clamp(m + (1 - |s|)·(rgb - m) + s), m the per-image mean.
/// s = 0 is the identity. Segmentation, coordinates and scenes are untouched.
Dataset shift_appearance(const Dataset& dataset, double strength);

/// `TLOCDS1\0` binary format.
void write_dataset(std::ostream& out, const Dataset& dataset);
void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
Dataset read_dataset(const std::string& path);

}  // namespace tloc::data
