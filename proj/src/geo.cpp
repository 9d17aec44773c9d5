#include "tloc/geo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tloc::geo {

namespace {

constexpr double kDegToRad = kPi / 180.0;
constexpr double kRadToDeg = 180.0 / kPi;

// Centroids shorter than this have no meaningful direction.
constexpr double kDegenerateNorm = 1e-9;

struct FaceFrame {
  UnitVec3 normal;
  UnitVec3 u_axis;
  UnitVec3 v_axis;
};

constexpr std::array<FaceFrame, 6> kFaces{{
    {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}},
    {{0, 1, 0}, {-1, 0, 0}, {0, 0, 1}},
    {{0, 0, 1}, {0, 1, 0}, {-1, 0, 0}},
    {{-1, 0, 0}, {0, -1, 0}, {0, 0, 1}},
    {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}},
    {{0, 0, -1}, {0, 1, 0}, {1, 0, 0}},
}};

double dot(const UnitVec3& a, const UnitVec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

double haversin(double angle) {
  const double s = std::sin(angle * 0.5);
  return s * s;
}

// Largest double strictly below 1.
const double kBelowOne = std::nextafter(1.0, 0.0);

}  // namespace

double normalize_lon(double lon) {
  double x = std::fmod(lon + 180.0, 360.0);
  if (x < 0.0) x += 360.0;
  double out = x - 180.0;
  if (out >= 180.0) out -= 360.0;
  return out;
}

GeoCoord GeoCoord::make(double lat, double lon) {
  if (!std::isfinite(lat) || !std::isfinite(lon)) {
    throw std::invalid_argument("non-finite coordinate");
  }
  if (lat < -90.0 || lat > 90.0) {
    throw std::invalid_argument("latitude out of range: " + std::to_string(lat));
  }
  return GeoCoord{lat, normalize_lon(lon)};
}

double gcd_km(const GeoCoord& a, const GeoCoord& b) {
  const double lat_a = a.lat * kDegToRad;
  const double lat_b = b.lat * kDegToRad;
  const double h = haversin(lat_b - lat_a) +
                   std::cos(lat_a) * std::cos(lat_b) * haversin((b.lon - a.lon) * kDegToRad);
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(std::min(1.0, h)));
}

GeoCoord destination(const GeoCoord& start, double bearing_deg, double distance_km) {
  const double lat1 = start.lat * kDegToRad;
  const double lon1 = start.lon * kDegToRad;
  const double theta = bearing_deg * kDegToRad;
  const double delta = distance_km / kEarthRadiusKm;
  const double sin_lat2 = std::sin(lat1) * std::cos(delta) + std::cos(lat1) * std::sin(delta) * std::cos(theta);
  const double lat2 = std::asin(std::clamp(sin_lat2, -1.0, 1.0));
  const double lon2 = lon1 + std::atan2(std::sin(theta) * std::sin(delta) * std::cos(lat1),
                                        std::cos(delta) - std::sin(lat1) * sin_lat2);
  return GeoCoord{std::clamp(lat2 * kRadToDeg, -90.0, 90.0), normalize_lon(lon2 * kRadToDeg)};
}

UnitVec3 to_unit_vec(const GeoCoord& c) {
  const double lat = c.lat * kDegToRad;
  const double lon = c.lon * kDegToRad;
  const double cl = std::cos(lat);
  return {cl * std::cos(lon), cl * std::sin(lon), std::sin(lat)};
}

GeoCoord from_unit_vec(const UnitVec3& p) {
  const double lat = std::atan2(p.z, std::hypot(p.x, p.y)) * kRadToDeg;
  const double lon = std::atan2(p.y, p.x) * kRadToDeg;
  return GeoCoord{std::clamp(lat, -90.0, 90.0), normalize_lon(lon)};
}

UnitVec3 normalized(const UnitVec3& p) {
  const double n = std::sqrt(dot(p, p));
  return {p.x / n, p.y / n, p.z / n};
}

std::optional<GeoCoord> chordal_mean(std::span<const GeoCoord> points) {
  if (points.empty()) throw std::invalid_argument("empty point set");
  UnitVec3 sum;
  for (const auto& c : points) {
    const UnitVec3 p = to_unit_vec(c);
    sum.x += p.x;
    sum.y += p.y;
    sum.z += p.z;
  }
  const double n = static_cast<double>(points.size());
  const UnitVec3 mean{sum.x / n, sum.y / n, sum.z / n};
  if (std::sqrt(dot(mean, mean)) < kDegenerateNorm) return std::nullopt;
  return from_unit_vec(normalized(mean));
}

FaceUV project_to_face(const UnitVec3& p) {
  int best = 0;
  double best_val = dot(p, kFaces[0].normal);
  for (int f = 1; f < 6; ++f) {
    const double val = dot(p, kFaces[f].normal);
    if (val > best_val) {
      best = f;
      best_val = val;
    }
  }
  const auto& frame = kFaces[best];
  const double s = dot(p, frame.u_axis) / best_val;
  const double t = dot(p, frame.v_axis) / best_val;
  const double u = std::clamp((s + 1.0) * 0.5, 0.0, kBelowOne);
  const double v = std::clamp((t + 1.0) * 0.5, 0.0, kBelowOne);
  return {best, u, v};
}

FaceUV project_to_face(const GeoCoord& c) { return project_to_face(to_unit_vec(c)); }

GeoCoord face_uv_to_coord(int face, double u, double v) {
  if (face < 0 || face > 5) throw std::invalid_argument("face id out of range");
  const auto& fr = kFaces[face];
  const double s = 2.0 * u - 1.0;
  const double t = 2.0 * v - 1.0;
  const UnitVec3 p{fr.normal.x + s * fr.u_axis.x + t * fr.v_axis.x,
                   fr.normal.y + s * fr.u_axis.y + t * fr.v_axis.y,
                   fr.normal.z + s * fr.u_axis.z + t * fr.v_axis.z};
  return from_unit_vec(normalized(p));
}

bool FaceCell::contains(const FaceUV& p) const {
  if (p.face != face) return false;
  const FaceCell c = cell_at(p, depth);
  return c.i == i && c.j == j;
}

FaceCell cell_at(const FaceUV& p, int depth) {
  if (depth < 0 || depth > kMaxCellDepth) throw std::invalid_argument("cell depth out of range");
  // Scaling by a power of two is exact, so floor gives the true rectangle.
  const double scale = std::ldexp(1.0, depth);
  return {p.face, depth, static_cast<std::uint32_t>(std::floor(p.u * scale)),
          static_cast<std::uint32_t>(std::floor(p.v * scale))};
}

GeoCoord face_center(const FaceCell& cell) {
  const double inv = std::ldexp(1.0, -cell.depth);
  return face_uv_to_coord(cell.face, (cell.i + 0.5) * inv, (cell.j + 0.5) * inv);
}

}  // namespace tloc::geo
