#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>

namespace tloc::geo {

inline constexpr double kEarthRadiusKm = 6371.0;
inline constexpr double kPi = 3.14159265358979323846;

/// Latitude/longitude in degrees. Latitude lies in [-90, 90]; longitude is
/// normalized into [-180, 180), so +180 becomes -180.
struct GeoCoord {
  double lat = 0.0;
  double lon = 0.0;

  /// Validates latitude and normalizes longitude. Throws std::invalid_argument
  /// for non-finite input or latitude outside [-90, 90].
  static GeoCoord make(double lat, double lon);

  friend bool operator==(const GeoCoord&, const GeoCoord&) = default;
};

struct UnitVec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Position on one face of the inscribed cube. u and v are in [0, 1).
struct FaceUV {
  int face = 0;
  double u = 0.0;
  double v = 0.0;
};

double normalize_lon(double lon);

/// Haversine great-circle distance on a sphere of radius kEarthRadiusKm.
double gcd_km(const GeoCoord& a, const GeoCoord& b);

/// Point reached by travelling `distance_km` along the great circle leaving
/// `start` at `bearing_deg` (clockwise from north).
GeoCoord destination(const GeoCoord& start, double bearing_deg, double distance_km);

UnitVec3 to_unit_vec(const GeoCoord& c);
GeoCoord from_unit_vec(const UnitVec3& p);
UnitVec3 normalized(const UnitVec3& p);

/// Normalized 3D centroid of the points. Returns nullopt when the centroid is
/// too close to the origin to define a direction (the caller supplies its own
/// fallback). Throws std::invalid_argument on an empty span.
std::optional<GeoCoord> chordal_mean(std::span<const GeoCoord> points);

/// Gnomonic projection onto the cube face with the largest coordinate along its
/// normal. Ties go to the lower face id. Face 0 is centered on (0, 0), face 2
/// on the north pole; faces 3..5 are the antipodes of 0..2.
FaceUV project_to_face(const GeoCoord& c);
FaceUV project_to_face(const UnitVec3& p);

/// Inverse gnomonic projection of a face position.
GeoCoord face_uv_to_coord(int face, double u, double v);

/// Axis-aligned rectangle on a face at quadtree depth `depth`: u in
/// [i/2^depth, (i+1)/2^depth), v likewise with j.
struct FaceCell {
  int face = 0;
  int depth = 0;
  std::uint32_t i = 0;
  std::uint32_t j = 0;

  bool contains(const FaceUV& p) const;
  friend bool operator==(const FaceCell&, const FaceCell&) = default;
};

inline constexpr int kMaxCellDepth = 30;

/// The depth-`depth` cell containing the face position.
FaceCell cell_at(const FaceUV& p, int depth);

/// Center of the cell mapped back to the sphere.
GeoCoord face_center(const FaceCell& cell);

}  // namespace tloc::geo
