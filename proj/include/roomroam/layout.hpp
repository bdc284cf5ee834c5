#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "roomroam/geometry.hpp"

namespace roomroam {

enum class FurnitureKind { TvStand, Sofa, ShelfA, ShelfB, MiniFridge };

std::string_view to_string(FurnitureKind kind);
std::optional<FurnitureKind> kind_from_string(std::string_view name);

struct FurnitureSpec {
  FurnitureKind kind;
  Vec2 half_extents;  // metres, unrotated
};

// Furniture footprints keyed by kind. The standard catalog holds the five living-room pieces.
class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<FurnitureSpec> specs);

  static const Catalog& standard();
  // {"pieces":[{"kind":"sofa","width_m":2.0,"depth_m":0.9}, ...]}
  static Catalog from_json(const nlohmann::json& doc);
  static Catalog load(const std::string& path);

  const std::vector<FurnitureSpec>& specs() const { return specs_; }
  const FurnitureSpec& spec(FurnitureKind kind) const;
  std::size_t size() const { return specs_.size(); }

 private:
  std::vector<FurnitureSpec> specs_;
};

std::vector<FurnitureSpec> catalog();

struct PlacedObject {
  FurnitureKind kind;
  Vec2 center;           // room coordinates
  int rotation_deg = 0;  // 0, 90, 180 or 270
  Vec2 half_extents;     // unrotated, resolved from the catalog at placement
  ConvexPoly footprint;  // room coordinates
};

struct Layout {
  Rect room{{0.0, 0.0}, {5.0, 5.0}};
  std::vector<PlacedObject> objects;
};

Rect square_room(double side_m = 5.0);
Rect make_room(double width_m, double height_m);

PlacedObject place(FurnitureKind kind, Vec2 center, int rotation_deg,
                   const Catalog& catalog = Catalog::standard());

// Footprints relative to the room centre, built as (center - room centre) + rotated local box.
// For centres on the sampler's dyadic grid the subtraction is exact, so a quarter turn of the
// layout about the room centre maps these polygons onto exactly rotated copies.
std::vector<ConvexPoly> centered_footprints(const Layout& layout);

// Throws Error(LayoutInvariant) naming the first violated invariant.
void validate_layout(const Layout& layout);

// Sampled centres lie on a grid of this pitch (2^-16 m).
inline constexpr double kCenterGrid = 0x1.0p-16;

Layout sample_layout(std::uint64_t seed, int n_objects, const Rect& room = square_room(),
                     const Catalog& catalog = Catalog::standard());

inline constexpr int kModelImageSize = 224;

BinaryImage layout_to_image(const Layout& layout, int resolution = kModelImageSize);

// Quarter turn counter-clockwise about the room centre; the room must be square.
Layout rotate_layout_90(const Layout& layout);

nlohmann::json layout_to_json(const Layout& layout);
nlohmann::json objects_to_json(const Layout& layout);
// Throws Error(Schema) with the offending field path, or Error(LayoutInvariant) when the
// document is well formed but the layout is not valid.
Layout layout_from_json(const nlohmann::json& doc, const Catalog& catalog = Catalog::standard());

}  // namespace roomroam
