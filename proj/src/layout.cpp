#include "roomroam/layout.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "roomroam/error.hpp"
#include "roomroam/random.hpp"

namespace roomroam {

namespace {

constexpr std::array<std::pair<FurnitureKind, std::string_view>, 5> kKindNames{{
    {FurnitureKind::TvStand, "tv_stand"},
    {FurnitureKind::Sofa, "sofa"},
    {FurnitureKind::ShelfA, "shelf_a"},
    {FurnitureKind::ShelfB, "shelf_b"},
    {FurnitureKind::MiniFridge, "mini_fridge"},
}};

Vec2 rotated_half_extents(Vec2 h, int rotation_deg) {
  return (quarter_turns_from_degrees(rotation_deg) % 2 == 1) ? Vec2{h.y, h.x} : h;
}

}  // namespace

std::string_view to_string(FurnitureKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

std::optional<FurnitureKind> kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  return std::nullopt;
}

Catalog::Catalog(std::vector<FurnitureSpec> specs) : specs_(std::move(specs)) {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const Vec2 h = specs_[i].half_extents;
    if (!(h.x > 0.0 && h.y > 0.0 && std::isfinite(h.x) && std::isfinite(h.y)))
      throw Error(ErrorCode::Config, "catalog half-extents must be positive and finite",
                  std::string(to_string(specs_[i].kind)));
    for (std::size_t j = 0; j < i; ++j)
      if (specs_[j].kind == specs_[i].kind)
        throw Error(ErrorCode::Config, "catalog lists a kind twice", std::string(to_string(specs_[i].kind)));
  }
}

const Catalog& Catalog::standard() {
  static const Catalog instance({
      {FurnitureKind::TvStand, {0.8, 0.2}},
      {FurnitureKind::Sofa, {1.0, 0.45}},
      {FurnitureKind::ShelfA, {0.4, 0.15}},
      {FurnitureKind::ShelfB, {0.4, 0.15}},
      {FurnitureKind::MiniFridge, {0.25, 0.25}},
  });
  return instance;
}

Catalog Catalog::from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("pieces") || !doc["pieces"].is_array())
    throw Error(ErrorCode::Schema, "catalog must be an object with a 'pieces' array", "pieces");
  std::vector<FurnitureSpec> specs;
  for (std::size_t i = 0; i < doc["pieces"].size(); ++i) {
    const auto& piece = doc["pieces"][i];
    const std::string path = "pieces[" + std::to_string(i) + "]";
    if (!piece.is_object() || !piece.contains("kind") || !piece["kind"].is_string())
      throw Error(ErrorCode::Schema, "catalog piece needs a string 'kind'", path + ".kind");
    const auto kind = kind_from_string(piece["kind"].get<std::string>());
    if (!kind) throw Error(ErrorCode::Schema, "unknown furniture kind", path + ".kind");
    for (const char* key : {"width_m", "depth_m"})
      if (!piece.contains(key) || !piece[key].is_number())
        throw Error(ErrorCode::Schema, std::string("catalog piece needs numeric '") + key + "'",
                    path + "." + key);
    specs.push_back({*kind, {0.5 * piece["width_m"].get<double>(), 0.5 * piece["depth_m"].get<double>()}});
  }
  return Catalog(std::move(specs));
}

Catalog Catalog::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot open catalog file", path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Schema, "catalog file is not valid JSON", e.what());
  }
}

const FurnitureSpec& Catalog::spec(FurnitureKind kind) const {
  for (const FurnitureSpec& s : specs_)
    if (s.kind == kind) return s;
  throw Error(ErrorCode::Schema, "furniture kind not in catalog", std::string(to_string(kind)));
}

std::vector<FurnitureSpec> catalog() { return Catalog::standard().specs(); }

Rect square_room(double side_m) { return make_room(side_m, side_m); }

Rect make_room(double width_m, double height_m) {
  Rect r{{0.0, 0.0}, {width_m, height_m}};
  validate(r);
  return r;
}

PlacedObject place(FurnitureKind kind, Vec2 center, int rotation_deg, const Catalog& catalog) {
  const Vec2 h = catalog.spec(kind).half_extents;
  return {kind, center, rotation_deg, h, transform(ConvexPoly::rectangle(h), center, rotation_deg)};
}

std::vector<ConvexPoly> centered_footprints(const Layout& layout) {
  const Vec2 rc = layout.room.center();
  std::vector<ConvexPoly> out;
  out.reserve(layout.objects.size());
  for (const PlacedObject& obj : layout.objects) {
    out.push_back(transform(ConvexPoly::rectangle(obj.half_extents), obj.center - rc, obj.rotation_deg));
  }
  return out;
}

void validate_layout(const Layout& layout) {
  validate(layout.room);
  const auto& objs = layout.objects;
  if (objs.size() > 5) throw Error(ErrorCode::LayoutInvariant, "a layout holds at most 5 objects");
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const std::string where = "objects[" + std::to_string(i) + "]";
    if (!inside(layout.room, objs[i].footprint))
      throw Error(ErrorCode::LayoutInvariant, "object footprint leaves the room", where);
    for (std::size_t j = 0; j < i; ++j) {
      if (objs[j].kind == objs[i].kind)
        throw Error(ErrorCode::LayoutInvariant, "furniture piece placed twice", where);
      if (polys_overlap(objs[i].footprint, objs[j].footprint))
        throw Error(ErrorCode::LayoutInvariant,
                    "object overlaps objects[" + std::to_string(j) + "]", where);
    }
  }
}

Layout sample_layout(std::uint64_t seed, int n_objects, const Rect& room, const Catalog& catalog) {
  if (n_objects < 3 || n_objects > 5)
    throw Error(ErrorCode::InvalidCount, "object count must be 3, 4 or 5, got " + std::to_string(n_objects));
  if (catalog.size() < static_cast<std::size_t>(n_objects))
    throw Error(ErrorCode::InvalidCount, "catalog has fewer pieces than requested");
  validate(room);

  Rng rng(seed);
  std::vector<std::size_t> order(catalog.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Partial Fisher-Yates: the first n entries are a uniform n-subset.
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_objects); ++i) {
    const std::size_t j = i + rng.below(order.size() - i);
    std::swap(order[i], order[j]);
  }
  order.resize(static_cast<std::size_t>(n_objects));
  std::sort(order.begin(), order.end());

  Layout layout;
  layout.room = room;
  constexpr double scale = 1.0 / kCenterGrid;
  int rejections = 0;
  for (std::size_t idx : order) {
    const FurnitureSpec& spec = catalog.specs()[idx];
    while (true) {
      const int rotation = 90 * static_cast<int>(rng.below(4));
      const Vec2 h = rotated_half_extents(spec.half_extents, rotation);
      // Grid points strictly inside the inset room; every sampled footprint is contained.
      const auto lo_x = static_cast<std::int64_t>(std::ceil((room.min.x + h.x) * scale));
      const auto hi_x = static_cast<std::int64_t>(std::floor((room.max.x - h.x) * scale));
      const auto lo_y = static_cast<std::int64_t>(std::ceil((room.min.y + h.y) * scale));
      const auto hi_y = static_cast<std::int64_t>(std::floor((room.max.y - h.y) * scale));
      if (hi_x < lo_x || hi_y < lo_y)
        throw Error(ErrorCode::InfeasibleLayout, "furniture piece does not fit in the room",
                    std::string(to_string(spec.kind)));
      const double cx = static_cast<double>(lo_x + static_cast<std::int64_t>(rng.below(hi_x - lo_x + 1))) * kCenterGrid;
      const double cy = static_cast<double>(lo_y + static_cast<std::int64_t>(rng.below(hi_y - lo_y + 1))) * kCenterGrid;
      PlacedObject obj = place(spec.kind, {cx, cy}, rotation, catalog);
      const bool clash = std::any_of(layout.objects.begin(), layout.objects.end(), [&](const PlacedObject& o) {
        return polys_overlap(o.footprint, obj.footprint);
      });
      if (!clash && inside(room, obj.footprint)) {
        layout.objects.push_back(std::move(obj));
        break;
      }
      if (++rejections > 10000)
        throw Error(ErrorCode::InfeasibleLayout, "more than 10000 placement rejections");
    }
  }
  return layout;
}

BinaryImage layout_to_image(const Layout& layout, int resolution) {
  validate(layout.room);
  for (const PlacedObject& obj : layout.objects)
    if (!inside(layout.room, obj.footprint)) throw Error(ErrorCode::OutOfBounds, "object extends outside the room");
  const auto polys = centered_footprints(layout);
  return rasterize_centered(layout.room.half_size(), polys, resolution);
}

Layout rotate_layout_90(const Layout& layout) {
  if (layout.room.width() != layout.room.height())
    throw Error(ErrorCode::InvalidInput, "quarter-turn symmetry needs a square room");
  const Vec2 rc = layout.room.center();
  Layout out;
  out.room = layout.room;
  for (const PlacedObject& obj : layout.objects) {
    const Vec2 c = rc + rotate_quarter(obj.center - rc, 1);
    const int rotation = (obj.rotation_deg + 90) % 360;
    out.objects.push_back({obj.kind, c, rotation, obj.half_extents,
                           transform(ConvexPoly::rectangle(obj.half_extents), c, rotation)});
  }
  return out;
}

nlohmann::json objects_to_json(const Layout& layout) {
  nlohmann::json objects = nlohmann::json::array();
  for (const PlacedObject& obj : layout.objects)
    objects.push_back({{"kind", std::string(to_string(obj.kind))},
                       {"center_m", {obj.center.x, obj.center.y}},
                       {"rotation_deg", obj.rotation_deg}});
  return objects;
}

nlohmann::json layout_to_json(const Layout& layout) {
  return {{"room", {{"width_m", layout.room.width()}, {"height_m", layout.room.height()}}},
          {"objects", objects_to_json(layout)}};
}

namespace {

double number_at(const nlohmann::json& obj, const char* key, const std::string& path) {
  if (!obj.contains(key)) throw Error(ErrorCode::Schema, std::string("missing field '") + key + "'", path + "." + key);
  const auto& v = obj[key];
  if (!v.is_number()) throw Error(ErrorCode::Schema, std::string("field '") + key + "' must be a number", path + "." + key);
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw Error(ErrorCode::Schema, "number must be finite", path + "." + key);
  return d;
}

}  // namespace

Layout layout_from_json(const nlohmann::json& doc, const Catalog& catalog) {
  if (!doc.is_object()) throw Error(ErrorCode::Schema, "layout must be a JSON object", "$");
  if (!doc.contains("room") || !doc["room"].is_object())
    throw Error(ErrorCode::Schema, "layout needs a 'room' object", "room");
  const double w = number_at(doc["room"], "width_m", "room");
  const double h = number_at(doc["room"], "height_m", "room");
  if (!(w > 0.0 && h > 0.0)) throw Error(ErrorCode::Schema, "room dimensions must be positive", "room");

  Layout layout;
  layout.room = make_room(w, h);
  if (!doc.contains("objects") || !doc["objects"].is_array())
    throw Error(ErrorCode::Schema, "layout needs an 'objects' array", "objects");
  const auto& objects = doc["objects"];
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    const std::string path = "objects[" + std::to_string(i) + "]";
    if (!o.is_object()) throw Error(ErrorCode::Schema, "object entry must be a JSON object", path);
    if (!o.contains("kind") || !o["kind"].is_string())
      throw Error(ErrorCode::Schema, "object needs a string 'kind'", path + ".kind");
    const auto kind = kind_from_string(o["kind"].get<std::string>());
    if (!kind) throw Error(ErrorCode::Schema, "unknown furniture kind '" + o["kind"].get<std::string>() + "'", path + ".kind");
    if (!o.contains("center_m") || !o["center_m"].is_array() || o["center_m"].size() != 2 ||
        !o["center_m"][0].is_number() || !o["center_m"][1].is_number())
      throw Error(ErrorCode::Schema, "'center_m' must be an array of two numbers", path + ".center_m");
    const Vec2 c{o["center_m"][0].get<double>(), o["center_m"][1].get<double>()};
    if (!std::isfinite(c.x) || !std::isfinite(c.y))
      throw Error(ErrorCode::Schema, "'center_m' must be finite", path + ".center_m");
    int rotation = 0;
    if (o.contains("rotation_deg")) {
      if (!o["rotation_deg"].is_number_integer())
        throw Error(ErrorCode::Schema, "'rotation_deg' must be an integer", path + ".rotation_deg");
      rotation = o["rotation_deg"].get<int>();
      if (rotation != 0 && rotation != 90 && rotation != 180 && rotation != 270)
        throw Error(ErrorCode::Schema, "'rotation_deg' must be 0, 90, 180 or 270", path + ".rotation_deg");
    }
    layout.objects.push_back(place(*kind, c, rotation, catalog));
  }
  validate_layout(layout);
  return layout;
}

}  // namespace roomroam
