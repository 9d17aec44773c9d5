#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tloc/geo.hpp"

namespace tloc::cells {

/// Hierarchical cell name: a cube face plus a base-4 path. Digit d at depth k
/// selects the quadrant (u bit = d & 1, v bit = d >> 1) of the parent.
struct CellToken {
  int face = 0;
  std::string path;

  int depth() const { return static_cast<int>(path.size()); }
  bool is_ancestor_of(const CellToken& other) const;
  bool contains_or_equal(const CellToken& other) const;
  geo::FaceCell to_face_cell() const;
  static CellToken from_face_cell(const geo::FaceCell& cell);

  /// "face/path", e.g. "2/0311". The root face cell is "2/".
  std::string str() const;
  static CellToken parse(std::string_view text);

  friend auto operator<=>(const CellToken&, const CellToken&) = default;
};

enum class Level { kCoarse = 0, kMiddle = 1, kFine = 2 };
inline constexpr std::array<Level, 3> kLevels{Level::kCoarse, Level::kMiddle, Level::kFine};

std::string_view level_name(Level level);
Level parse_level(std::string_view name);

struct Cell {
  CellToken token;
  std::int64_t train_count = 0;
  geo::GeoCoord mean_gps;
};

/// Retained leaves of one adaptive partition, sorted by token. The class id of
/// a cell is its position in `cells`.
struct Partition {
  Level level = Level::kCoarse;
  std::vector<Cell> cells;
  std::int64_t min_images = 0;
  std::int64_t max_images = 0;
  int max_depth = 20;
  // Points that fell into leaves below min_images.
  std::int64_t dropped = 0;
  // Leaves still above max_images after reaching max_depth (kept, not dropped).
  std::vector<CellToken> oversize;

  std::size_t size() const { return cells.size(); }
};

struct PartitionParams {
  std::int64_t min_images = 50;
  std::int64_t max_images = 1000;
  int max_depth = 20;
};

/// Splits the six face cells recursively while a cell holds more than
/// max_images points, then discards leaves holding fewer than min_images.
Partition build_partition(std::span<const geo::GeoCoord> points, const PartitionParams& params,
                          Level level = Level::kCoarse);

struct IndexParams {
  std::int64_t min_images = 50;
  std::int64_t max_coarse = 5000;
  std::int64_t max_middle = 2000;
  std::int64_t max_fine = 1000;
  int max_depth = 20;

  void validate() const;
};

struct CellIndex {
  Partition coarse;
  Partition middle;
  Partition fine;

  const Partition& at(Level level) const;
  Partition& at(Level level);
};

CellIndex build_index(std::span<const geo::GeoCoord> points, const IndexParams& params);

/// Class id of the retained cell containing c, or nullopt when c lies in a
/// dropped region.
std::optional<std::size_t> locate(const Partition& partition, const geo::GeoCoord& c);
std::optional<std::size_t> locate(const CellIndex& index, const geo::GeoCoord& c, Level level);

/// Mean training location of a cell. Throws std::out_of_range for bad ids.
geo::GeoCoord class_to_gps(const CellIndex& index, Level level, std::size_t class_id);

/// `TLOC-CELLS v1` text format.
void write_index(std::ostream& out, const CellIndex& index);
std::string serialize_index(const CellIndex& index);
CellIndex read_index(std::istream& in);

}  // namespace tloc::cells
