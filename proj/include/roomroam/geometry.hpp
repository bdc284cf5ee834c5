#pragma once

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace roomroam {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
  friend constexpr Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {a.x * s, a.y * s}; }
  friend constexpr bool operator==(Vec2 a, Vec2 b) = default;
};

constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }
inline double distance(Vec2 a, Vec2 b) { return norm(a - b); }

// Rotation by k quarter turns counter-clockwise. Exact: only swaps and negations.
constexpr Vec2 rotate_quarter(Vec2 v, int quarter_turns) {
  switch (((quarter_turns % 4) + 4) % 4) {
    case 1: return {-v.y, v.x};
    case 2: return {-v.x, -v.y};
    case 3: return {v.y, -v.x};
    default: return v;
  }
}

// Rotation by an angle given through its cosine and sine.
constexpr Vec2 rotate(Vec2 v, double c, double s) {
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

inline Vec2 rotate(Vec2 v, double radians) {
  return rotate(v, std::cos(radians), std::sin(radians));
}

struct Rect {
  Vec2 min;
  Vec2 max;

  double width() const { return max.x - min.x; }
  double height() const { return max.y - min.y; }
  Vec2 center() const { return {0.5 * (min.x + max.x), 0.5 * (min.y + max.y)}; }
  Vec2 half_size() const { return {0.5 * width(), 0.5 * height()}; }
};

void validate(const Rect& rect);

// Closed, strictly convex, counter-clockwise polygon.
class ConvexPoly {
 public:
  ConvexPoly() = default;
  // Throws Error(InvalidInput) unless the vertices satisfy the class invariants.
  explicit ConvexPoly(std::vector<Vec2> vertices);

  static ConvexPoly rectangle(Vec2 half_extents);
  static ConvexPoly axis_box(Vec2 min, Vec2 max);

  std::span<const Vec2> vertices() const { return vertices_; }
  std::size_t size() const { return vertices_.size(); }
  double area() const;
  Vec2 centroid() const;

  friend bool operator==(const ConvexPoly&, const ConvexPoly&) = default;

 private:
  std::vector<Vec2> vertices_;
};

bool contains(const ConvexPoly& poly, Vec2 p);
Vec2 closest_point(const ConvexPoly& poly, Vec2 p);
inline double distance(const ConvexPoly& poly, Vec2 p) { return distance(p, closest_point(poly, p)); }

// Interiors intersect; polygons that only touch do not overlap.
bool polys_overlap(const ConvexPoly& a, const ConvexPoly& b);

// Rotates `poly` (given about its own origin) by rotation_deg in {0,90,180,270}, then
// translates it by `center`. Throws Error(InvalidRotation) for any other angle.
ConvexPoly transform(const ConvexPoly& poly, Vec2 center, int rotation_deg);
ConvexPoly translate(const ConvexPoly& poly, Vec2 offset);
int quarter_turns_from_degrees(int rotation_deg);

bool inside(const Rect& room, const ConvexPoly& poly);

struct BinaryImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // row-major, 0 or 1; row 0 is the +y edge of the room

  BinaryImage() = default;
  BinaryImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::size_t count() const;

  friend bool operator==(const BinaryImage&, const BinaryImage&) = default;
};

// Pixel (row, col) is set iff its centre lies in any object. Objects must lie inside the room.
BinaryImage rasterize(const Rect& room, std::span<const ConvexPoly> objects, int resolution);

// Same sampling, with objects already expressed relative to the room centre. Pixel centres are
// generated as half-integer multiples of the pixel pitch, so a quarter turn of the objects about
// the centre of a square room yields exactly the quarter-turned image.
BinaryImage rasterize_centered(Vec2 half_size, std::span<const ConvexPoly> objects, int resolution);

BinaryImage flip_horizontal(const BinaryImage& img);
BinaryImage flip_vertical(const BinaryImage& img);
// Counter-clockwise quarter turns, matching rotate_quarter in room coordinates.
BinaryImage rotate_image(const BinaryImage& img, int quarter_turns);

// Binary PGM: "P5\n<w> <h>\n255\n" followed by w*h bytes, row-major; object pixels are 255.
void write_pgm(std::ostream& out, const BinaryImage& img);
std::string to_pgm(const BinaryImage& img);

}  // namespace roomroam
