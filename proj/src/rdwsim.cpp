#include "roomroam/rdwsim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <numbers>
#include <ostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "roomroam/error.hpp"
#include "roomroam/random.hpp"

namespace roomroam {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
// Cosine threshold for "heading into" an element; also the feasibility slack of reset headings.
constexpr double kApproachEps = 1e-9;

// Angle sweep used when the force direction would still approach a nearby element.
struct SweepTable {
  std::array<double, 181> c{};
  std::array<double, 181> s{};
  SweepTable() {
    for (int k = 0; k <= 180; ++k) {
      c[k] = std::cos(k * kDeg);
      s[k] = std::sin(k * kDeg);
    }
  }
};

const SweepTable& sweep_table() {
  static const SweepTable table;
  return table;
}

struct Probe {
  Vec2 force;
  double clearance = std::numeric_limits<double>::infinity();
  int near_count = 0;
  std::array<Vec2, 16> near_dirs{};  // unit vectors from the user toward elements inside the buffer
};

// Room-centred world. Every quantity is computed with expressions that commute exactly with a
// quarter turn (signed coordinate permutation), and force components are summed with a
// correctly rounded sum, so rotating the world rotates every trajectory bit-for-bit.
class World {
 public:
  World(const Layout& layout, const SimConfig& cfg)
      : half_(layout.room.half_size()), obstacles_(centered_footprints(layout)), cfg_(cfg) {}

  Vec2 half() const { return half_; }

  bool in_free_space(Vec2 p) const {
    if (!(std::abs(p.x) < half_.x && std::abs(p.y) < half_.y)) return false;
    for (const ConvexPoly& poly : obstacles_)
      if (contains(poly, p)) return false;
    return true;
  }

  // Throws Error(InvalidPosition) when p is not strictly in free space.
  Probe probe(Vec2 p) const {
    if (!in_free_space(p)) throw Error(ErrorCode::InvalidPosition, "position is not in free space");
    Probe out;
    std::array<double, 20> fx{}, fy{};
    std::size_t n = 0;
    const auto add = [&](Vec2 c, double weight) {
      const Vec2 d = p - c;
      const double r = norm(d);
      const double scale = weight / falloff(r);
      fx[n] = d.x * scale;
      fy[n] = d.y * scale;
      ++n;
      out.clearance = std::min(out.clearance, r);
      if (r < cfg_.reset_buffer && out.near_count < static_cast<int>(out.near_dirs.size()))
        out.near_dirs[out.near_count++] = (c - p) * (1.0 / r);
    };
    const double ww = cfg_.wall_segment_weight;
    add({half_.x, std::clamp(p.y, -half_.y, half_.y)}, ww);
    add({-half_.x, std::clamp(p.y, -half_.y, half_.y)}, ww);
    add({std::clamp(p.x, -half_.x, half_.x), half_.y}, ww);
    add({std::clamp(p.x, -half_.x, half_.x), -half_.y}, ww);
    for (const ConvexPoly& poly : obstacles_) add(closest_point(poly, p), cfg_.obstacle_weight);
    out.force = {exact_sum(fx.data(), n), exact_sum(fy.data(), n)};
    return out;
  }

  double clearance(Vec2 p) const {
    if (!in_free_space(p)) return 0.0;
    double best = std::min({half_.x - p.x, half_.x + p.x, half_.y - p.y, half_.y + p.y});
    for (const ConvexPoly& poly : obstacles_) best = std::min(best, distance(poly, p));
    return best;
  }

 private:
  double falloff(double r) const {
    const double e = cfg_.force_falloff_exponent;
    return e == 2.0 ? r * r * r : std::pow(r, 1.0 + e);
  }

  Vec2 half_;
  std::vector<ConvexPoly> obstacles_;
  SimConfig cfg_;
};

struct Walker {
  Vec2 pp, ph, vp, vh;
  double dist = 0.0;
  int resets = 0;
};

Vec2 normalized(Vec2 v) { return v * (1.0 / norm(v)); }

bool heading_into(const Probe& pr, Vec2 heading) {
  for (int i = 0; i < pr.near_count; ++i)
    if (dot(heading, pr.near_dirs[i]) > kApproachEps) return true;
  return false;
}

Vec2 reset_heading(const Probe& pr, Vec2 current) {
  Vec2 base;
  if (pr.force.x != 0.0 || pr.force.y != 0.0) {
    base = normalized(pr.force);
  } else {
    Vec2 away;
    for (int i = 0; i < pr.near_count; ++i) away = away - pr.near_dirs[i];
    base = (away.x != 0.0 || away.y != 0.0) ? normalized(away) : -current;
  }
  if (!heading_into(pr, base)) return base;
  const SweepTable& t = sweep_table();
  for (int k = 1; k <= 180; ++k) {
    const Vec2 ccw = rotate(base, t.c[k], t.s[k]);
    if (!heading_into(pr, ccw)) return ccw;
    const Vec2 cw = rotate(base, t.c[k], -t.s[k]);
    if (!heading_into(pr, cw)) return cw;
  }
  return base;
}

GainSet gains_for(Vec2 heading, Vec2 force, const SimConfig& cfg, bool walking, int turn_direction) {
  GainSet g;
  if (force.x == 0.0 && force.y == 0.0) return g;
  const double along = dot(heading, force);
  const double side = cross(heading, force);
  if (walking) {
    g.translation = along < 0.0 ? cfg.trans_gain.min : cfg.trans_gain.max;
    if (std::isfinite(cfg.curvature_radius)) g.curvature_sign = side >= 0.0 ? 1 : -1;
  }
  if (turn_direction != 0) {
    const bool toward = side != 0.0 ? (turn_direction > 0) == (side > 0.0) : along < 0.0;
    g.rotation = toward ? cfg.rot_gain.max : cfg.rot_gain.min;
  }
  g.translation = std::clamp(g.translation, cfg.trans_gain.min, cfg.trans_gain.max);
  g.rotation = std::clamp(g.rotation, cfg.rot_gain.min, cfg.rot_gain.max);
  return g;
}

struct Turn {
  double virt_rotation = 0.0;
  bool aligned = false;
  GainSet gains;
};

// Virtual turn toward the target, capped at turn_speed * dt; the final frame of a turn lands
// exactly on the target bearing and counts as aligned.
Turn turn_toward(Walker& w, Vec2 target, Vec2 force, const SimConfig& cfg) {
  Turn t;
  const Vec2 to = target - w.vp;
  const double to_len = norm(to);
  if (to_len == 0.0) {
    t.aligned = true;
    t.gains = gains_for(w.ph, force, cfg, true, 0);
    return t;
  }
  const Vec2 u = to * (1.0 / to_len);
  const double err = std::atan2(cross(w.vh, u), dot(w.vh, u));
  const double max_turn = cfg.turn_speed * kDeg * cfg.dt;
  t.aligned = std::abs(err) <= max_turn;
  t.virt_rotation = t.aligned ? err : std::copysign(max_turn, err);
  if (std::abs(t.virt_rotation) < 1e-12) t.virt_rotation = 0.0;
  const int dir = t.virt_rotation > 0.0 ? 1 : (t.virt_rotation < 0.0 ? -1 : 0);
  t.gains = gains_for(w.ph, force, cfg, t.aligned, dir);
  w.vh = t.aligned ? u : rotate(w.vh, t.virt_rotation);
  if (t.virt_rotation != 0.0) w.ph = normalized(rotate(w.ph, t.virt_rotation / t.gains.rotation));
  return t;
}

void walk(Walker& w, double virt_step, const GainSet& g, const SimConfig& cfg) {
  w.vp = w.vp + w.vh * virt_step;
  w.dist += virt_step;
  const double phys_step = virt_step / g.translation;
  w.pp = w.pp + w.ph * phys_step;
  if (g.curvature_sign != 0) w.ph = normalized(rotate(w.ph, g.curvature_sign * phys_step / cfg.curvature_radius));
}

void reset_to_gradient(Walker& w, const Probe& pr) {
  ++w.resets;
  w.ph = reset_heading(pr, w.ph);
}

Walker to_walker(const UserState& s, Vec2 rc) {
  return {s.phys_pos - rc, normalized(s.phys_heading), s.virt_pos, normalized(s.virt_heading),
          s.virt_distance_walked, s.resets};
}

UserState to_state(const Walker& w, Vec2 rc) {
  return {w.pp + rc, w.ph, w.vp, w.vh, w.dist, w.resets};
}

void record(GainAudit& a, const GainSet& g, bool walked, bool turned, const SimConfig& cfg) {
  if (walked) {
    ++a.walking_frames;
    a.min_translation = std::min(a.min_translation, g.translation);
    a.max_translation = std::max(a.max_translation, g.translation);
    if (g.curvature_sign != 0) a.max_abs_curvature = std::max(a.max_abs_curvature, 1.0 / cfg.curvature_radius);
  }
  if (turned) {
    ++a.turning_frames;
    a.min_rotation = std::min(a.min_rotation, g.rotation);
    a.max_rotation = std::max(a.max_rotation, g.rotation);
  }
}

}  // namespace

SimConfig SimConfig::without_redirection() {
  SimConfig cfg;
  cfg.trans_gain = {1.0, 1.0};
  cfg.rot_gain = {1.0, 1.0};
  cfg.curvature_radius = std::numeric_limits<double>::infinity();
  return cfg;
}

void SimConfig::validate(const Rect* room) const {
  const auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw Error(ErrorCode::Config, std::string(name) + " must be positive");
  };
  positive(dt, "dt");
  positive(walk_speed, "walk_speed");
  positive(turn_speed, "turn_speed");
  positive(curvature_radius, "curvature_radius");
  positive(reset_buffer, "reset_buffer");
  positive(target_collect_dist, "target_collect_dist");
  positive(force_falloff_exponent, "force_falloff_exponent");
  positive(wall_segment_weight, "wall_segment_weight");
  positive(obstacle_weight, "obstacle_weight");
  if (!(episode_distance >= 0.0)) throw Error(ErrorCode::Config, "episode_distance must be non-negative");
  for (const auto& [r, name] : {std::pair{trans_gain, "trans_gain"}, std::pair{rot_gain, "rot_gain"}})
    if (!(r.min > 0.0 && r.min <= 1.0 && 1.0 <= r.max))
      throw Error(ErrorCode::Config, std::string(name) + " range must be positive and contain 1.0");
  if (!(target_radius.min > 0.0 && target_radius.min <= target_radius.max))
    throw Error(ErrorCode::Config, "target_radius range is invalid");
  if (room && !(reset_buffer < 0.5 * std::min(room->width(), room->height())))
    throw Error(ErrorCode::Config, "reset_buffer must be below half the room's shorter side");
}

double UserState::phys_heading_angle() const { return std::atan2(phys_heading.y, phys_heading.x); }
double UserState::virt_heading_angle() const { return std::atan2(virt_heading.y, virt_heading.x); }

Vec2 heading_from_angle(double radians) { return {std::cos(radians), std::sin(radians)}; }

double exact_sum(const double* values, std::size_t n) {
  // Shewchuk's partials (as in Python's math.fsum), finite inputs only.
  std::array<double, 64> partials{};
  std::size_t np = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double x = values[k];
    std::size_t i = 0;
    for (std::size_t j = 0; j < np; ++j) {
      double y = partials[j];
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    np = i;
    partials[np++] = x;
  }
  if (np == 0) return 0.0;
  double hi = partials[--np];
  double lo = 0.0;
  while (np > 0) {
    const double x = hi;
    const double y = partials[--np];
    hi = x + y;
    const double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  // Half-way case: make the rounding of the remaining partials correct.
  if (np > 0 && ((lo < 0.0 && partials[np - 1] < 0.0) || (lo > 0.0 && partials[np - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

Vec2 apf_force(const Layout& layout, const SimConfig& cfg, Vec2 p) {
  return World(layout, cfg).probe(p - layout.room.center()).force;
}

GainSet select_gains(const UserState& state, Vec2 force, const SimConfig& cfg, bool walking, int turn_direction) {
  if (!std::isfinite(force.x) || !std::isfinite(force.y))
    throw Error(ErrorCode::InvalidInput, "force must be finite");
  return gains_for(state.phys_heading, force, cfg, walking, turn_direction);
}

UserState step(const UserState& state, Vec2 target, const Layout& layout, const SimConfig& cfg) {
  const Vec2 rc = layout.room.center();
  const World world(layout, cfg);
  Walker w = to_walker(state, rc);
  const Probe pr = world.probe(w.pp);
  const Turn t = turn_toward(w, target, pr.force, cfg);
  if (t.aligned) walk(w, cfg.walk_speed * cfg.dt, t.gains, cfg);
  return to_state(w, rc);
}

UserState advance(const UserState& state, double virt_rotation, double virt_translation, const GainSet& gains,
                  const SimConfig& cfg) {
  Walker w = to_walker(state, {});
  if (virt_rotation != 0.0) {
    w.vh = normalized(rotate(w.vh, virt_rotation));
    w.ph = normalized(rotate(w.ph, virt_rotation / gains.rotation));
  }
  if (virt_translation != 0.0) walk(w, virt_translation, gains, cfg);
  return to_state(w, {});
}

UserState check_and_reset(const UserState& state, const Layout& layout, const SimConfig& cfg) {
  const Vec2 rc = layout.room.center();
  const World world(layout, cfg);
  Walker w = to_walker(state, rc);
  const Probe pr = world.probe(w.pp);
  if (!heading_into(pr, w.ph)) return state;
  reset_to_gradient(w, pr);
  UserState out = state;
  out.phys_heading = w.ph;
  out.resets = w.resets;
  return out;
}

EpisodeResult run_episode(const Layout& layout, const SimConfig& cfg, std::uint64_t seed,
                          const EpisodeOptions& options) {
  cfg.validate(&layout.room);
  const int k = options.quarter_turns;
  if (k % 4 != 0 && layout.room.width() != layout.room.height())
    throw Error(ErrorCode::InvalidInput, "rotated random streams need a square room");
  const World world(layout, cfg);
  const Vec2 rc = layout.room.center();
  const Vec2 half = world.half();
  Rng rng(seed);

  EpisodeResult result;
  result.seed = seed;
  Walker w;
  if (options.start_pos) {
    w.pp = *options.start_pos - rc;
    if (!(world.clearance(w.pp) > cfg.reset_buffer))
      throw Error(ErrorCode::InvalidPosition, "start position needs clearance above the reset buffer");
  } else {
    bool found = false;
    for (int attempt = 0; attempt < 10000 && !found; ++attempt) {
      const Vec2 offset{(rng.uniform() - 0.5) * (2.0 * half.x), (rng.uniform() - 0.5) * (2.0 * half.y)};
      w.pp = rotate_quarter(offset, k);
      found = world.clearance(w.pp) > cfg.reset_buffer;
    }
    if (!found) throw Error(ErrorCode::InfeasibleLayout, "no start position with clearance above the reset buffer");
  }
  if (options.start_heading) {
    w.ph = normalized(*options.start_heading);
  } else {
    w.ph = rotate_quarter(heading_from_angle(rng.uniform(0.0, 2.0 * std::numbers::pi)), k);
  }
  w.vh = w.ph;

  std::size_t scripted = 0;
  const auto next_target = [&]() -> Vec2 {
    if (scripted < options.scripted_targets.size())
      return rotate_quarter(options.scripted_targets[scripted++], k);
    const double r = rng.uniform(cfg.target_radius.min, cfg.target_radius.max);
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return w.vp + rotate_quarter(Vec2{r * std::cos(a), r * std::sin(a)}, k);
  };

  const double virt_step = cfg.walk_speed * cfg.dt;
  const std::int64_t frame_cap =
      10'000'000 + static_cast<std::int64_t>(200.0 * cfg.episode_distance / virt_step);
  Vec2 target{};
  bool have_target = false;
  bool just_reset = false;
  const auto trace = [&] {
    if (options.record_trace) result.phys_trace.push_back({result.frames, w.pp + rc, w.vp, w.resets});
  };
  trace();
  while (w.dist < cfg.episode_distance) {
    if (options.deadline && (result.frames & 4095) == 0 && std::chrono::steady_clock::now() > *options.deadline)
      throw Error(ErrorCode::Timeout, "episode exceeded its time budget");
    if (result.frames > frame_cap) throw Error(ErrorCode::Numeric, "episode did not terminate");
    if (!have_target || norm(target - w.vp) <= cfg.target_collect_dist) {
      target = next_target();
      have_target = true;
    }
    const Probe pr = world.probe(w.pp);
    result.min_clearance = std::min(result.min_clearance, pr.clearance);
    const Turn t = turn_toward(w, target, pr.force, cfg);
    if (t.virt_rotation != 0.0) just_reset = false;
    bool walked = false;
    if (t.aligned) {
      if (!just_reset && heading_into(pr, w.ph)) {
        reset_to_gradient(w, pr);
        just_reset = true;
      } else {
        walk(w, virt_step, t.gains, cfg);
        just_reset = false;
        walked = true;
      }
    }
    record(result.gains, t.gains, walked, t.virt_rotation != 0.0, cfg);
    ++result.frames;
    trace();
  }
  result.min_clearance = std::min(result.min_clearance, world.clearance(w.pp));
  result.resets = w.resets;
  result.distance = w.dist;
  return result;
}

ResetEstimate summarize(std::vector<int> per_path) {
  ResetEstimate est;
  est.per_path = std::move(per_path);
  const std::size_t n = est.per_path.size();
  if (n == 0) return est;
  double sum = 0.0;
  for (int r : est.per_path) sum += r;
  est.mean = sum / static_cast<double>(n);
  if (n > 1) {
    double ss = 0.0;
    for (int r : est.per_path) ss += (r - est.mean) * (r - est.mean);
    est.std = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return est;
}

ResetEstimate estimate_resets_serial(const Layout& layout, const SimConfig& cfg, int paths, std::uint64_t seed,
                                     const EpisodeOptions& options) {
  if (paths < 1) throw Error(ErrorCode::InvalidInput, "paths must be at least 1");
  std::vector<int> per(static_cast<std::size_t>(paths));
  for (int i = 0; i < paths; ++i) per[i] = run_episode(layout, cfg, derive_seed(seed, i), options).resets;
  return summarize(std::move(per));
}

ResetEstimate estimate_resets(const Layout& layout, const SimConfig& cfg, int paths, std::uint64_t seed,
                              const EpisodeOptions& options) {
  if (paths < 1) throw Error(ErrorCode::InvalidInput, "paths must be at least 1");
  std::vector<int> per(static_cast<std::size_t>(paths));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(paths));
#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < paths; ++i) {
    try {
      per[i] = run_episode(layout, cfg, derive_seed(seed, i), options).resets;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  // Lowest failing index wins, as in the serial loop.
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return summarize(std::move(per));
}

void write_trace_csv(std::ostream& out, const EpisodeResult& result) {
  out << "step,phys_x,phys_y,virt_x,virt_y,resets\n";
  out.precision(17);
  for (const TraceRow& row : result.phys_trace)
    out << row.step << ',' << row.phys.x << ',' << row.phys.y << ',' << row.virt.x << ',' << row.virt.y << ','
        << row.resets << '\n';
}

}  // namespace roomroam
