#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tloc/cells.hpp"
#include "tloc/error.hpp"
#include "tloc/geo.hpp"
#include "tloc/synth.hpp"

using namespace tloc;
using namespace tloc::data;

namespace {

std::string bytes_of(const Dataset& d) {
  std::ostringstream out;
  write_dataset(out, d);
  return out.str();
}

std::size_t nearest_location(const World& w, const geo::GeoCoord& c) {
  std::size_t best = 0;
  double bd = 1e300;
  for (std::size_t i = 0; i < w.locations.size(); ++i) {
    const double d = geo::gcd_km(w.locations[i].center, c);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

const World& toy_world() {
  static const World w = [] {
    WorldSpec ws;
    ws.seed = 7;
    return generate_world(ws);
  }();
  return w;
}

}  // namespace

TEST_CASE("split sizes and value ranges") {
  const World& w = toy_world();
  CHECK(w.locations.size() == 16);
  CHECK(w.train.size() == 2000);
  CHECK(w.val.size() == 200);
  CHECK(w.test.size() == 200);
  for (const Dataset* d : {&w.train, &w.val, &w.test}) {
    CHECK(d->h == 32);
    CHECK(d->n_seg_classes == 8);
    for (const auto& s : d->samples) {
      REQUIRE(s.rgb.size() == 3 * 32 * 32);
      REQUIRE(s.seg.size() == 32 * 32);
      for (float v : s.rgb) CHECK((v >= 0.0f && v <= 1.0f));
      for (auto c : s.seg) CHECK(c < 8);
      CHECK(s.scene < 3);
    }
  }
  std::set<std::size_t> clusters;
  for (const auto& l : w.locations) clusters.insert(l.cluster);
  CHECK(clusters.size() == 4);
}

TEST_CASE("same seed gives byte-identical datasets") {
  WorldSpec ws;
  ws.seed = 7;
  const World again = generate_world(ws);
  CHECK(bytes_of(again.train) == bytes_of(toy_world().train));
  CHECK(bytes_of(again.test) == bytes_of(toy_world().test));
  ws.seed = 8;
  CHECK(bytes_of(generate_world(ws).train) != bytes_of(toy_world().train));
}

TEST_CASE("segmentation is a function of the location") {
  const World& w = toy_world();
  std::map<std::size_t, const Sample*> first;
  std::size_t rgb_differs = 0;
  for (const Dataset* d : {&w.train, &w.val, &w.test}) {
    for (const auto& s : d->samples) {
      const std::size_t loc = nearest_location(w, s.coord);
      CHECK(geo::gcd_km(w.locations[loc].center, s.coord) < 0.1);
      CHECK(s.scene == w.locations[loc].scene);
      CHECK(s.seg == render_layout(w.locations[loc], 32, 32, 4));
      auto [it, inserted] = first.emplace(loc, &s);
      if (!inserted) {
        CHECK(it->second->seg == s.seg);
        rgb_differs += it->second->rgb != s.rgb ? 1 : 0;
      }
    }
  }
  CHECK(first.size() == 16);
  CHECK(rgb_differs == 2400 - 16);
}

TEST_CASE("layouts are pairwise distinct") {
  const World& w = toy_world();
  for (std::size_t i = 0; i < w.locations.size(); ++i) {
    for (std::size_t j = i + 1; j < w.locations.size(); ++j) {
      std::size_t diff = 0;
      for (std::size_t k = 0; k < 16; ++k) diff += w.locations[i].layout[k] != w.locations[j].layout[k] ? 1 : 0;
      CHECK(diff >= 4);
    }
  }
}

TEST_CASE("every location sits in one fine cell of the toy partition") {
  const World& w = toy_world();
  const auto idx = cells::build_index(w.train.coords(), {10, 800, 400, 200, 20});
  std::map<std::size_t, std::optional<std::size_t>> cell_of;
  for (const Dataset* d : {&w.train, &w.val, &w.test}) {
    for (const auto& s : d->samples) {
      const std::size_t loc = nearest_location(w, s.coord);
      const auto c = cells::locate(idx.fine, s.coord);
      REQUIRE(c.has_value());
      auto [it, inserted] = cell_of.emplace(loc, c);
      CHECK(it->second == c);
    }
  }
  std::set<std::size_t> distinct;
  for (const auto& [loc, c] : cell_of) distinct.insert(*c);
  CHECK(distinct.size() == 16);
}

TEST_CASE("appearance shift") {
  const World& w = toy_world();
  const Dataset same = shift_appearance(w.test, 0.0);
  CHECK(bytes_of(same) == bytes_of(w.test));
  for (double s : {-0.4, -0.1, 0.25}) {
    const Dataset shifted = shift_appearance(w.test, s);
    REQUIRE(shifted.size() == w.test.size());
    for (std::size_t i = 0; i < shifted.size(); ++i) {
      CHECK(shifted.samples[i].seg == w.test.samples[i].seg);
      CHECK(shifted.samples[i].scene == w.test.samples[i].scene);
      CHECK(shifted.samples[i].coord.lat == w.test.samples[i].coord.lat);
      CHECK(shifted.samples[i].rgb != w.test.samples[i].rgb);
    }
  }
  // Away from the clamp the mean moves by exactly the shift.
  Dataset mid = w.test;
  mid.samples.resize(1);
  for (std::size_t k = 0; k < mid.samples[0].rgb.size(); ++k) {
    mid.samples[0].rgb[k] = 0.4f + 0.2f * static_cast<float>(k % 17) / 16.0f;
  }
  const auto mean = [](const std::vector<float>& v) {
    double s = 0;
    for (float x : v) s += x;
    return s / v.size();
  };
  for (double s : {-0.1, 0.15}) {
    const Dataset d = shift_appearance(mid, s);
    CHECK(std::abs(mean(d.samples[0].rgb) - mean(mid.samples[0].rgb) - s) < 1e-6);
  }
}

TEST_CASE("dataset file format") {
  const World& w = toy_world();
  const std::string bytes = bytes_of(w.val);
  REQUIRE(bytes.size() == 8 + 5 * 4 + 200 * (3 * 32 * 32 * 4 + 32 * 32 + 16 + 2));
  CHECK(std::memcmp(bytes.data(), "TLOCDS1\0", 8) == 0);
  std::uint32_t header[5];
  std::memcpy(header, bytes.data() + 8, sizeof header);
  CHECK(header[0] == 200);
  CHECK(header[1] == 32);
  CHECK(header[2] == 32);
  CHECK(header[3] == 8);
  CHECK(header[4] == 3);
  std::istringstream in(bytes);
  const Dataset back = read_dataset(in);
  CHECK(bytes_of(back) == bytes);

  std::istringstream bad("TLOCDS2" + bytes.substr(7));
  CHECK_THROWS_AS(read_dataset(bad), IoError);
  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_dataset(cut), IoError);
  CHECK_THROWS_AS(read_dataset(std::string("/nonexistent.tlocds")), IoError);
}

TEST_CASE("world spec validation") {
  WorldSpec ws;
  ws.n_locations = 0;
  CHECK_THROWS_AS(ws.validate(), std::invalid_argument);
  CHECK_THROWS_AS(generate_world(ws), std::invalid_argument);
  ws = {};
  ws.n_val = ws.n_locations * ws.samples_per_location;
  CHECK_THROWS_AS(ws.validate(), std::invalid_argument);
  ws = {};
  ws.gps_noise_km = 0.5;
  CHECK_THROWS_AS(ws.validate(), std::invalid_argument);
}
