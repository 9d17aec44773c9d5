#include "tloc/synth.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "tloc/error.hpp"
#include "tloc/rng.hpp"

namespace tloc::data {

using geo::GeoCoord;

std::vector<GeoCoord> Dataset::coords() const {
  std::vector<GeoCoord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.coord);
  return out;
}

void WorldSpec::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("world spec: " + what);
  };
  need(n_locations > 0, "n_locations must be positive");
  need(n_clusters > 0 && n_clusters <= n_locations, "n_clusters must be in [1, n_locations]");
  need(samples_per_location > 0, "samples_per_location must be positive");
  need(image_h > 0 && image_w > 0, "image size must be positive");
  need(layout_grid > 0 && image_h % layout_grid == 0 && image_w % layout_grid == 0,
       "image size must be divisible by layout_grid");
  need(n_seg_classes >= 2 && n_seg_classes <= 256, "n_seg_classes must be in [2, 256]");
  need(n_scene_classes >= 1 && n_scene_classes <= 65535, "n_scene_classes must be in [1, 65535]");
  need(perturbation >= 0.0 && perturbation < 1.0, "perturbation must be in [0, 1)");
  need(pixel_noise >= 0.0, "pixel_noise must be nonnegative");
  need(gps_noise_km >= 0.0 && gps_noise_km < 0.1, "gps_noise_km must be in [0, 0.1)");
  need(cluster_radius_km > 0.0 && min_location_separation_km >= 0.0, "cluster geometry must be positive");
  need(n_val + n_test < n_locations * samples_per_location, "val + test must leave training samples");
  need(min_layout_distance <= layout_grid * layout_grid, "min_layout_distance exceeds block count");
}

namespace {

constexpr int kMarginDepth = 10;

GeoCoord random_on_sphere(Rng& rng) {
  geo::UnitVec3 p;
  double n2 = 0.0;
  do {
    p = {rng.normal(), rng.normal(), rng.normal()};
    n2 = p.x * p.x + p.y * p.y + p.z * p.z;
  } while (n2 < 1e-12);
  return geo::from_unit_vec(geo::normalized(p));
}

// True when a ring slightly wider than the GPS noise around c stays inside one
// depth-10 cube cell, so every noisy sample shares the cells of its center at
// all depths up to 10.
bool clear_of_cell_edges(const GeoCoord& c, double radius_km) {
  const geo::FaceCell home = geo::cell_at(geo::project_to_face(c), kMarginDepth);
  if (radius_km <= 0.0) return true;
  for (int k = 0; k < 32; ++k) {
    const GeoCoord q = geo::destination(c, k * (360.0 / 32.0), radius_km);
    if (!home.contains(geo::project_to_face(q))) return false;
  }
  return true;
}

std::size_t hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

Sample render_sample(const WorldSpec& spec, const Location& loc, Rng& rng) {
  const std::size_t h = spec.image_h, w = spec.image_w;
  Sample s;
  s.seg = render_layout(loc, h, w, spec.layout_grid);
  s.scene = loc.scene;
  const double p = spec.perturbation;
  const double brightness = rng.uniform(1.0 - p, 1.0 + p);
  const double contrast = rng.uniform(1.0 - p, 1.0 + p);
  s.rgb.resize(3 * h * w);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) {
      const double base = loc.palette[s.seg[i] * 3 + ch];
      double v = ((base - 0.5) * contrast + 0.5) * brightness + spec.pixel_noise * rng.normal();
      s.rgb[ch * h * w + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  const double bearing = rng.uniform(0.0, 360.0);
  const double dist = spec.gps_noise_km * std::sqrt(rng.uniform());
  s.coord = geo::destination(loc.center, bearing, dist);
  return s;
}

}  // namespace

std::vector<std::uint8_t> render_layout(const Location& loc, std::size_t h, std::size_t w, std::size_t grid) {
  std::vector<std::uint8_t> seg(h * w);
  const std::size_t bh = h / grid, bw = w / grid;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) seg[y * w + x] = loc.layout[(y / bh) * grid + x / bw];
  }
  return seg;
}

World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, "world");
  World world;

  std::vector<GeoCoord> cluster_centers;
  for (std::size_t c = 0; c < spec.n_clusters; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("world generation: cannot place clusters");
      const GeoCoord cand = random_on_sphere(rng);
      const bool ok = std::all_of(cluster_centers.begin(), cluster_centers.end(), [&](const GeoCoord& o) {
        return geo::gcd_km(o, cand) >= spec.min_cluster_separation_km;
      });
      if (ok) {
        cluster_centers.push_back(cand);
        break;
      }
    }
  }

  for (std::size_t i = 0; i < spec.n_locations; ++i) {
    Location loc;
    loc.cluster = i % spec.n_clusters;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("world generation: cannot place locations");
      const double bearing = rng.uniform(0.0, 360.0);
      const double dist = spec.cluster_radius_km * std::sqrt(rng.uniform());
      const GeoCoord cand = geo::destination(cluster_centers[loc.cluster], bearing, dist);
      const bool separated = std::all_of(world.locations.begin(), world.locations.end(), [&](const Location& o) {
        return geo::gcd_km(o.center, cand) >= spec.min_location_separation_km;
      });
      if (separated && clear_of_cell_edges(cand, 1.5 * spec.gps_noise_km)) {
        loc.center = cand;
        break;
      }
    }
    // Regenerate layouts that are too close to an existing one.
    const std::size_t blocks = spec.layout_grid * spec.layout_grid;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("world generation: cannot find distinct layouts");
      loc.layout.resize(blocks);
      for (auto& b : loc.layout) b = static_cast<std::uint8_t>(rng.below(spec.n_seg_classes));
      const bool distinct = std::all_of(world.locations.begin(), world.locations.end(), [&](const Location& o) {
        return hamming(o.layout, loc.layout) >= std::max<std::size_t>(spec.min_layout_distance, 1);
      });
      if (distinct) break;
    }
    loc.palette.resize(spec.n_seg_classes * 3);
    for (auto& v : loc.palette) v = static_cast<float>(rng.uniform(0.1, 0.9));
    loc.scene = static_cast<std::uint16_t>(rng.below(spec.n_scene_classes));
    world.locations.push_back(std::move(loc));
  }

  Rng sample_rng(spec.seed, "samples");
  std::vector<Sample> all;
  all.reserve(spec.n_locations * spec.samples_per_location);
  for (const auto& loc : world.locations) {
    for (std::size_t k = 0; k < spec.samples_per_location; ++k) all.push_back(render_sample(spec, loc, sample_rng));
  }
  Rng split_rng(spec.seed, "split");
  split_rng.shuffle(all);

  const auto header = [&](Dataset& d) {
    d.h = static_cast<std::uint32_t>(spec.image_h);
    d.w = static_cast<std::uint32_t>(spec.image_w);
    d.n_seg_classes = static_cast<std::uint32_t>(spec.n_seg_classes);
    d.n_scene_classes = static_cast<std::uint32_t>(spec.n_scene_classes);
  };
  header(world.train);
  header(world.val);
  header(world.test);
  const std::size_t n_train = all.size() - spec.n_val - spec.n_test;
  for (std::size_t i = 0; i < all.size(); ++i) {
    Dataset& dst = i < n_train ? world.train : (i < n_train + spec.n_val ? world.val : world.test);
    dst.samples.push_back(std::move(all[i]));
  }
  return world;
}

Dataset shift_appearance(const Dataset& dataset, double strength) {
  Dataset out = dataset;
  if (strength == 0.0) return out;
  const double keep = 1.0 - std::abs(strength);
  for (auto& s : out.samples) {
    double mean = 0.0;
    for (float v : s.rgb) mean += v;
    mean /= static_cast<double>(s.rgb.size());
    for (float& v : s.rgb) v = static_cast<float>(std::clamp(mean + keep * (v - mean) + strength, 0.0, 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kDatasetMagic{'T', 'L', 'O', 'C', 'D', 'S', '1', '\0'};

template <typename T>
void put_le(std::ostream& out, T v) {
  char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError("dataset truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes[i]) << (8 * i));
  return v;
}

}  // namespace

void write_dataset(std::ostream& out, const Dataset& d) {
  out.write(kDatasetMagic.data(), kDatasetMagic.size());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.samples.size()));
  put_le<std::uint32_t>(out, d.h);
  put_le<std::uint32_t>(out, d.w);
  put_le<std::uint32_t>(out, d.n_seg_classes);
  put_le<std::uint32_t>(out, d.n_scene_classes);
  const std::size_t hw = std::size_t{d.h} * d.w;
  for (const auto& s : d.samples) {
    if (s.rgb.size() != 3 * hw || s.seg.size() != hw) throw std::invalid_argument("sample size does not match header");
    for (float v : s.rgb) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    out.write(reinterpret_cast<const char*>(s.seg.data()), static_cast<std::streamsize>(hw));
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(s.coord.lat));
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(s.coord.lon));
    put_le<std::uint16_t>(out, s.scene);
  }
  if (!out) throw IoError("failed writing dataset");
}

void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  write_dataset(out, d);
  out.flush();
  if (!out) throw IoError("failed writing dataset: " + path);
}

Dataset read_dataset(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kDatasetMagic) throw IoError("not a TLOCDS1 dataset");
  Dataset d;
  const auto count = get_le<std::uint32_t>(in);
  d.h = get_le<std::uint32_t>(in);
  d.w = get_le<std::uint32_t>(in);
  d.n_seg_classes = get_le<std::uint32_t>(in);
  d.n_scene_classes = get_le<std::uint32_t>(in);
  if (d.h == 0 || d.w == 0 || d.h > 4096 || d.w > 4096) throw IoError("dataset header has invalid image size");
  const std::size_t hw = std::size_t{d.h} * d.w;
  d.samples.resize(count);
  std::vector<unsigned char> buf(3 * hw * 4);
  for (auto& s : d.samples) {
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw IoError("dataset truncated");
    }
    s.rgb.resize(3 * hw);
    for (std::size_t i = 0; i < 3 * hw; ++i) {
      const std::uint32_t bits = std::uint32_t{buf[4 * i]} | (std::uint32_t{buf[4 * i + 1]} << 8) |
                                 (std::uint32_t{buf[4 * i + 2]} << 16) | (std::uint32_t{buf[4 * i + 3]} << 24);
      s.rgb[i] = std::bit_cast<float>(bits);
    }
    s.seg.resize(hw);
    if (!in.read(reinterpret_cast<char*>(s.seg.data()), static_cast<std::streamsize>(hw))) throw IoError("dataset truncated");
    for (auto c : s.seg) {
      if (c >= d.n_seg_classes) throw IoError("segmentation id out of range in dataset");
    }
    const double lat = std::bit_cast<double>(get_le<std::uint64_t>(in));
    const double lon = std::bit_cast<double>(get_le<std::uint64_t>(in));
    try {
      s.coord = GeoCoord::make(lat, lon);
    } catch (const std::invalid_argument& e) {
      throw IoError(std::string("dataset coordinate: ") + e.what());
    }
    s.scene = get_le<std::uint16_t>(in);
    if (s.scene >= d.n_scene_classes) throw IoError("scene id out of range in dataset");
  }
  return d;
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  try {
    return read_dataset(in);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace tloc::data
