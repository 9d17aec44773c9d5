#include "tloc/cells.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "tloc/error.hpp"

namespace tloc::cells {

using geo::FaceCell;
using geo::FaceUV;
using geo::GeoCoord;

bool CellToken::is_ancestor_of(const CellToken& other) const {
  return face == other.face && path.size() < other.path.size() &&
         other.path.compare(0, path.size(), path) == 0;
}

bool CellToken::contains_or_equal(const CellToken& other) const {
  return *this == other || is_ancestor_of(other);
}

FaceCell CellToken::to_face_cell() const {
  FaceCell cell{face, depth(), 0, 0};
  for (char d : path) {
    const int digit = d - '0';
    cell.i = (cell.i << 1) | static_cast<std::uint32_t>(digit & 1);
    cell.j = (cell.j << 1) | static_cast<std::uint32_t>(digit >> 1);
  }
  return cell;
}

CellToken CellToken::from_face_cell(const FaceCell& cell) {
  CellToken t{cell.face, std::string(static_cast<std::size_t>(cell.depth), '0')};
  for (int k = 0; k < cell.depth; ++k) {
    const int shift = cell.depth - 1 - k;
    const int digit = static_cast<int>(((cell.i >> shift) & 1U) | (((cell.j >> shift) & 1U) << 1));
    t.path[static_cast<std::size_t>(k)] = static_cast<char>('0' + digit);
  }
  return t;
}

std::string CellToken::str() const { return std::to_string(face) + "/" + path; }

CellToken CellToken::parse(std::string_view text) {
  const auto slash = text.find('/');
  if (slash != 1 || text[0] < '0' || text[0] > '5') {
    throw std::invalid_argument("bad cell token: " + std::string(text));
  }
  CellToken t{text[0] - '0', std::string(text.substr(2))};
  if (t.depth() > geo::kMaxCellDepth) throw std::invalid_argument("cell token too deep");
  for (char c : t.path) {
    if (c < '0' || c > '3') throw std::invalid_argument("bad cell token: " + std::string(text));
  }
  return t;
}

std::string_view level_name(Level level) {
  switch (level) {
    case Level::kCoarse: return "coarse";
    case Level::kMiddle: return "middle";
    case Level::kFine: return "fine";
  }
  return "?";
}

Level parse_level(std::string_view name) {
  for (Level l : kLevels) {
    if (level_name(l) == name) return l;
  }
  throw std::invalid_argument("unknown level: " + std::string(name));
}

namespace {

struct Builder {
  std::span<const GeoCoord> points;
  std::vector<FaceUV> uv;
  PartitionParams params;
  Partition* out;

  void retain(const FaceCell& cell, const std::vector<std::uint32_t>& members) {
    std::vector<GeoCoord> pts;
    pts.reserve(members.size());
    for (auto idx : members) pts.push_back(points[idx]);
    Cell c;
    c.token = CellToken::from_face_cell(cell);
    c.train_count = static_cast<std::int64_t>(members.size());
    // Antipodal clouds have no centroid direction; use the cell center.
    c.mean_gps = geo::chordal_mean(pts).value_or(geo::face_center(cell));
    out->cells.push_back(std::move(c));
  }

  void visit(const FaceCell& cell, std::vector<std::uint32_t> members) {
    const auto count = static_cast<std::int64_t>(members.size());
    if (count > params.max_images && cell.depth < params.max_depth) {
      std::array<std::vector<std::uint32_t>, 4> children;
      const int child_depth = cell.depth + 1;
      for (auto idx : members) {
        const FaceCell c = geo::cell_at(uv[idx], child_depth);
        children[(c.i & 1U) | ((c.j & 1U) << 1)].push_back(idx);
      }
      members.clear();
      members.shrink_to_fit();
      for (std::uint32_t q = 0; q < 4; ++q) {
        const FaceCell child{cell.face, child_depth, (cell.i << 1) | (q & 1U), (cell.j << 1) | (q >> 1)};
        visit(child, std::move(children[q]));
      }
      return;
    }
    if (count == 0) return;
    if (count < params.min_images) {
      out->dropped += count;
      return;
    }
    if (count > params.max_images) out->oversize.push_back(CellToken::from_face_cell(cell));
    retain(cell, members);
  }
};

}  // namespace

Partition build_partition(std::span<const GeoCoord> points, const PartitionParams& params, Level level) {
  if (points.empty()) throw std::invalid_argument("empty point list");
  if (params.min_images < 1) throw std::invalid_argument("min_images must be >= 1");
  if (params.max_images < params.min_images) throw std::invalid_argument("max_images must be >= min_images");
  if (params.max_depth < 1 || params.max_depth > geo::kMaxCellDepth) {
    throw std::invalid_argument("max_depth must be in [1, 30]");
  }
  Partition out;
  out.level = level;
  out.min_images = params.min_images;
  out.max_images = params.max_images;
  out.max_depth = params.max_depth;

  Builder b{points, {}, params, &out};
  b.uv.reserve(points.size());
  std::array<std::vector<std::uint32_t>, 6> faces;
  for (std::size_t k = 0; k < points.size(); ++k) {
    b.uv.push_back(geo::project_to_face(points[k]));
    faces[static_cast<std::size_t>(b.uv.back().face)].push_back(static_cast<std::uint32_t>(k));
  }
  for (int f = 0; f < 6; ++f) b.visit(FaceCell{f, 0, 0, 0}, std::move(faces[static_cast<std::size_t>(f)]));

  std::sort(out.cells.begin(), out.cells.end(),
            [](const Cell& a, const Cell& c) { return a.token < c.token; });
  return out;
}

void IndexParams::validate() const {
  if (min_images < 1) throw std::invalid_argument("min_images must be >= 1");
  if (max_fine < min_images) throw std::invalid_argument("max_fine must be >= min_images");
  if (!(max_coarse >= max_middle && max_middle >= max_fine)) {
    throw std::invalid_argument("max_images must be nonincreasing from coarse to fine");
  }
  if (max_depth < 1 || max_depth > geo::kMaxCellDepth) throw std::invalid_argument("max_depth must be in [1, 30]");
}

const Partition& CellIndex::at(Level level) const {
  switch (level) {
    case Level::kCoarse: return coarse;
    case Level::kMiddle: return middle;
    case Level::kFine: return fine;
  }
  throw std::invalid_argument("bad level");
}

Partition& CellIndex::at(Level level) {
  return const_cast<Partition&>(std::as_const(*this).at(level));
}

CellIndex build_index(std::span<const GeoCoord> points, const IndexParams& params) {
  params.validate();
  CellIndex index;
  index.coarse = build_partition(points, {params.min_images, params.max_coarse, params.max_depth}, Level::kCoarse);
  index.middle = build_partition(points, {params.min_images, params.max_middle, params.max_depth}, Level::kMiddle);
  index.fine = build_partition(points, {params.min_images, params.max_fine, params.max_depth}, Level::kFine);
  return index;
}

std::optional<std::size_t> locate(const Partition& partition, const GeoCoord& c) {
  const FaceUV p = geo::project_to_face(c);
  const CellToken leaf = CellToken::from_face_cell(geo::cell_at(p, geo::kMaxCellDepth));
  // Cells never overlap, so the only candidate is the last token <= leaf.
  auto it = std::upper_bound(partition.cells.begin(), partition.cells.end(), leaf,
                             [](const CellToken& t, const Cell& cell) { return t < cell.token; });
  if (it == partition.cells.begin()) return std::nullopt;
  --it;
  if (!it->token.contains_or_equal(leaf)) return std::nullopt;
  return static_cast<std::size_t>(it - partition.cells.begin());
}

std::optional<std::size_t> locate(const CellIndex& index, const GeoCoord& c, Level level) {
  return locate(index.at(level), c);
}

GeoCoord class_to_gps(const CellIndex& index, Level level, std::size_t class_id) {
  const Partition& p = index.at(level);
  if (class_id >= p.cells.size()) {
    throw std::out_of_range("class id " + std::to_string(class_id) + " out of range for " +
                            std::string(level_name(level)) + " partition of " +
                            std::to_string(p.cells.size()) + " cells");
  }
  return p.cells[class_id].mean_gps;
}

namespace {
constexpr std::string_view kCellsHeader = "TLOC-CELLS v1";
}

void write_index(std::ostream& out, const CellIndex& index) {
  out << kCellsHeader << '\n';
  char buf[64];
  for (Level level : kLevels) {
    for (const Cell& c : index.at(level).cells) {
      out << level_name(level) << '\t' << c.token.str() << '\t' << c.train_count << '\t';
      std::snprintf(buf, sizeof buf, "%.9f\t%.9f", c.mean_gps.lat, c.mean_gps.lon);
      out << buf << '\n';
    }
  }
}

std::string serialize_index(const CellIndex& index) {
  std::ostringstream os;
  write_index(os, index);
  return os.str();
}

CellIndex read_index(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCellsHeader) throw IoError("missing TLOC-CELLS v1 header");
  CellIndex index;
  for (Level l : kLevels) index.at(l).level = l;
  std::size_t lineno = 1;
  int last_level = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto tab = rest.find('\t');
      fields.push_back(rest.substr(0, tab));
      if (tab == std::string_view::npos) break;
      rest.remove_prefix(tab + 1);
    }
    const auto fail = [&](const std::string& why) {
      return IoError("cells line " + std::to_string(lineno) + ": " + why);
    };
    if (fields.size() != 5) throw fail("expected 5 tab-separated fields");
    try {
      const Level level = parse_level(fields[0]);
      if (static_cast<int>(level) < last_level) throw fail("levels out of order");
      last_level = static_cast<int>(level);
      Cell c;
      c.token = CellToken::parse(fields[1]);
      c.train_count = std::stoll(std::string(fields[2]));
      c.mean_gps = GeoCoord::make(std::stod(std::string(fields[3])), std::stod(std::string(fields[4])));
      auto& cells = index.at(level).cells;
      if (!cells.empty() && !(cells.back().token < c.token)) throw fail("cells not in token order");
      if (!cells.empty() && cells.back().token.is_ancestor_of(c.token)) throw fail("overlapping cells");
      cells.push_back(std::move(c));
    } catch (const IoError&) {
      throw;
    } catch (const std::exception& e) {
      throw fail(e.what());
    }
  }
  return index;
}

}  // namespace tloc::cells
