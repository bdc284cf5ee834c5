#include "roomroam/geometry.hpp"

#include <algorithm>
#include <limits>
#include <ostream>
#include <sstream>

#include "roomroam/error.hpp"

namespace roomroam {

void validate(const Rect& rect) {
  if (!(std::isfinite(rect.min.x) && std::isfinite(rect.min.y) && std::isfinite(rect.max.x) &&
        std::isfinite(rect.max.y)))
    throw Error(ErrorCode::InvalidInput, "rectangle has non-finite corners");
  if (!(rect.min.x < rect.max.x && rect.min.y < rect.max.y))
    throw Error(ErrorCode::InvalidInput, "rectangle min must be strictly below max");
}

ConvexPoly::ConvexPoly(std::vector<Vec2> vertices) : vertices_(std::move(vertices)) {
  const std::size_t n = vertices_.size();
  if (n < 3) throw Error(ErrorCode::InvalidInput, "polygon needs at least 3 vertices");
  for (const Vec2& v : vertices_)
    if (!std::isfinite(v.x) || !std::isfinite(v.y))
      throw Error(ErrorCode::InvalidInput, "polygon vertex is not finite");
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = vertices_[i];
    const Vec2 b = vertices_[(i + 1) % n];
    const Vec2 c = vertices_[(i + 2) % n];
    if (!(cross(b - a, c - b) > 0.0))
      throw Error(ErrorCode::InvalidInput, "polygon must be strictly convex and counter-clockwise");
  }
  if (!(area() > 1e-9)) throw Error(ErrorCode::InvalidInput, "polygon area is degenerate");
}

ConvexPoly ConvexPoly::rectangle(Vec2 h) {
  return ConvexPoly({{-h.x, -h.y}, {h.x, -h.y}, {h.x, h.y}, {-h.x, h.y}});
}

ConvexPoly ConvexPoly::axis_box(Vec2 lo, Vec2 hi) {
  return ConvexPoly({{lo.x, lo.y}, {hi.x, lo.y}, {hi.x, hi.y}, {lo.x, hi.y}});
}

double ConvexPoly::area() const {
  double twice = 0.0;
  const std::size_t n = vertices_.size();
  for (std::size_t i = 0; i < n; ++i) twice += cross(vertices_[i], vertices_[(i + 1) % n]);
  return 0.5 * twice;
}

Vec2 ConvexPoly::centroid() const {
  double a2 = 0.0;
  Vec2 acc;
  const std::size_t n = vertices_.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 p = vertices_[i];
    const Vec2 q = vertices_[(i + 1) % n];
    const double w = cross(p, q);
    a2 += w;
    acc = acc + (p + q) * w;
  }
  return acc * (1.0 / (3.0 * a2));
}

bool contains(const ConvexPoly& poly, Vec2 p) {
  const auto v = poly.vertices();
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = v[i];
    const Vec2 b = v[(i + 1) % n];
    if (cross(b - a, p - a) < 0.0) return false;
  }
  return true;
}

Vec2 closest_point(const ConvexPoly& poly, Vec2 p) {
  if (contains(poly, p)) return p;
  const auto v = poly.vertices();
  const std::size_t n = v.size();
  Vec2 best = v[0];
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = v[i];
    const Vec2 e = v[(i + 1) % n] - a;
    double t = dot(p - a, e) / dot(e, e);
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 c = a + e * t;
    const Vec2 d = p - c;
    const double d2 = dot(d, d);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = c;
    }
  }
  return best;
}

namespace {

// Separating axis test; touching projections count as separated.
bool separated_along_edges(const ConvexPoly& a, const ConvexPoly& b) {
  const auto va = a.vertices();
  const std::size_t n = va.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e = va[(i + 1) % n] - va[i];
    const Vec2 axis{e.y, -e.x};
    double amin = std::numeric_limits<double>::infinity(), amax = -amin;
    double bmin = amin, bmax = -amin;
    for (Vec2 p : va) {
      const double s = dot(p, axis);
      amin = std::min(amin, s);
      amax = std::max(amax, s);
    }
    for (Vec2 p : b.vertices()) {
      const double s = dot(p, axis);
      bmin = std::min(bmin, s);
      bmax = std::max(bmax, s);
    }
    if (amax <= bmin || bmax <= amin) return true;
  }
  return false;
}

}  // namespace

bool polys_overlap(const ConvexPoly& a, const ConvexPoly& b) {
  return !separated_along_edges(a, b) && !separated_along_edges(b, a);
}

int quarter_turns_from_degrees(int rotation_deg) {
  switch (rotation_deg) {
    case 0: return 0;
    case 90: return 1;
    case 180: return 2;
    case 270: return 3;
    default:
      throw Error(ErrorCode::InvalidRotation,
                  "rotation must be one of 0, 90, 180, 270 degrees, got " + std::to_string(rotation_deg));
  }
}

ConvexPoly transform(const ConvexPoly& poly, Vec2 center, int rotation_deg) {
  const int k = quarter_turns_from_degrees(rotation_deg);
  std::vector<Vec2> out;
  out.reserve(poly.size());
  for (Vec2 v : poly.vertices()) out.push_back(center + rotate_quarter(v, k));
  return ConvexPoly(std::move(out));
}

ConvexPoly translate(const ConvexPoly& poly, Vec2 offset) {
  std::vector<Vec2> out;
  out.reserve(poly.size());
  for (Vec2 v : poly.vertices()) out.push_back(v + offset);
  return ConvexPoly(std::move(out));
}

bool inside(const Rect& room, const ConvexPoly& poly) {
  for (Vec2 v : poly.vertices())
    if (v.x < room.min.x || v.x > room.max.x || v.y < room.min.y || v.y > room.max.y) return false;
  return true;
}

std::size_t BinaryImage::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

BinaryImage rasterize_centered(Vec2 half, std::span<const ConvexPoly> objects, int resolution) {
  if (resolution < 16) throw Error(ErrorCode::InvalidInput, "resolution must be at least 16 pixels");
  for (const ConvexPoly& poly : objects)
    for (Vec2 v : poly.vertices())
      if (std::abs(v.x) > half.x || std::abs(v.y) > half.y)
        throw Error(ErrorCode::OutOfBounds, "object extends outside the room");

  BinaryImage img(resolution, resolution);
  const double pitch_x = 2.0 * half.x / resolution;
  const double pitch_y = 2.0 * half.y / resolution;
  const double mid = 0.5 * resolution;
  for (const ConvexPoly& poly : objects) {
    // Bounding box restricts the scan; the test itself is exact per pixel centre.
    double lo_x = half.x, hi_x = -half.x, lo_y = half.y, hi_y = -half.y;
    for (Vec2 v : poly.vertices()) {
      lo_x = std::min(lo_x, v.x);
      hi_x = std::max(hi_x, v.x);
      lo_y = std::min(lo_y, v.y);
      hi_y = std::max(hi_y, v.y);
    }
    const int col0 = std::max(0, static_cast<int>(std::floor(lo_x / pitch_x + mid - 0.5)) - 1);
    const int col1 = std::min(resolution - 1, static_cast<int>(std::ceil(hi_x / pitch_x + mid - 0.5)) + 1);
    const int row0 = std::max(0, static_cast<int>(std::floor(mid - 0.5 - hi_y / pitch_y)) - 1);
    const int row1 = std::min(resolution - 1, static_cast<int>(std::ceil(mid - 0.5 - lo_y / pitch_y)) + 1);
    for (int row = row0; row <= row1; ++row) {
      const double y = (mid - row - 0.5) * pitch_y;
      for (int col = col0; col <= col1; ++col) {
        const double x = (col + 0.5 - mid) * pitch_x;
        if (contains(poly, {x, y})) img.at(row, col) = 1;
      }
    }
  }
  return img;
}

BinaryImage rasterize(const Rect& room, std::span<const ConvexPoly> objects, int resolution) {
  validate(room);
  std::vector<ConvexPoly> centered;
  centered.reserve(objects.size());
  for (const ConvexPoly& poly : objects) {
    if (!inside(room, poly)) throw Error(ErrorCode::OutOfBounds, "object extends outside the room");
    centered.push_back(translate(poly, -room.center()));
  }
  return rasterize_centered(room.half_size(), centered, resolution);
}

BinaryImage flip_horizontal(const BinaryImage& img) {
  BinaryImage out(img.width, img.height);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) out.at(r, c) = img.at(r, img.width - 1 - c);
  return out;
}

BinaryImage flip_vertical(const BinaryImage& img) {
  BinaryImage out(img.width, img.height);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) out.at(r, c) = img.at(img.height - 1 - r, c);
  return out;
}

BinaryImage rotate_image(const BinaryImage& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  if (img.width != img.height) throw Error(ErrorCode::Shape, "rotation needs a square image");
  const int n = img.width;
  BinaryImage out(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      switch (k) {
        case 1: out.at(r, c) = img.at(c, n - 1 - r); break;
        case 2: out.at(r, c) = img.at(n - 1 - r, n - 1 - c); break;
        default: out.at(r, c) = img.at(n - 1 - c, r); break;
      }
    }
  return out;
}

void write_pgm(std::ostream& out, const BinaryImage& img) {
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  for (std::uint8_t v : img.data) out.put(static_cast<char>(v ? 255 : 0));
}

std::string to_pgm(const BinaryImage& img) {
  std::ostringstream ss;
  write_pgm(ss, img);
  return ss.str();
}

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidRotation: return "invalid-rotation";
    case ErrorCode::OutOfBounds: return "out-of-bounds";
    case ErrorCode::InvalidCount: return "invalid-count";
    case ErrorCode::InfeasibleLayout: return "infeasible-layout";
    case ErrorCode::InvalidPosition: return "invalid-position";
    case ErrorCode::InvalidInput: return "invalid-input";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::Config: return "config";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Format: return "format";
    case ErrorCode::Import: return "import";
    case ErrorCode::Range: return "range";
    case ErrorCode::Schema: return "schema";
    case ErrorCode::LayoutInvariant: return "layout-invariant";
    case ErrorCode::Timeout: return "timeout";
  }
  return "unknown";
}

}  // namespace roomroam
