#pragma once

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <vector>

#include "roomroam/geometry.hpp"
#include "roomroam/layout.hpp"

namespace roomroam {

struct GainRange {
  double min = 1.0;
  double max = 1.0;
};

struct SimConfig {
  double dt = 1.0 / 90.0;             // s
  double walk_speed = 1.4;            // m/s, virtual
  double turn_speed = 90.0;           // deg/s, virtual
  GainRange trans_gain{0.86, 1.26};   // virtual / physical translation
  GainRange rot_gain{0.67, 1.24};     // virtual / physical rotation
  double curvature_radius = 7.5;      // m; +inf disables curvature
  double reset_buffer = 0.2;          // m
  GainRange target_radius{2.0, 6.0};  // m
  double target_collect_dist = 0.1;   // m
  double episode_distance = 500.0;    // m of virtual walking
  double force_falloff_exponent = 2.0;
  double wall_segment_weight = 1.0;
  double obstacle_weight = 1.0;
  double turn_tolerance_deg = 1.0;

  // Unit gains, no curvature.
  static SimConfig without_redirection();
  // Throws Error(Config) on a violated invariant; checks the buffer against `room` when given.
  void validate(const Rect* room = nullptr) const;
};

// Headings are unit vectors; the *_angle accessors give radians in (-pi, pi].
struct UserState {
  Vec2 phys_pos;
  Vec2 phys_heading{1.0, 0.0};
  Vec2 virt_pos;
  Vec2 virt_heading{1.0, 0.0};
  double virt_distance_walked = 0.0;
  int resets = 0;

  double phys_heading_angle() const;
  double virt_heading_angle() const;
};

Vec2 heading_from_angle(double radians);

struct GainSet {
  double translation = 1.0;
  double rotation = 1.0;
  int curvature_sign = 0;  // -1 clockwise, +1 counter-clockwise, 0 off
};

// Extremes of every gain actually applied during an episode.
struct GainAudit {
  double min_translation = std::numeric_limits<double>::infinity();
  double max_translation = -std::numeric_limits<double>::infinity();
  double min_rotation = std::numeric_limits<double>::infinity();
  double max_rotation = -std::numeric_limits<double>::infinity();
  double max_abs_curvature = 0.0;  // 1/m
  std::int64_t walking_frames = 0;
  std::int64_t turning_frames = 0;
};

struct TraceRow {
  std::int64_t step;
  Vec2 phys;
  Vec2 virt;
  int resets;
};

struct EpisodeResult {
  int resets = 0;
  double distance = 0.0;
  std::vector<TraceRow> phys_trace;  // filled only when requested
  std::uint64_t seed = 0;
  GainAudit gains;
  std::int64_t frames = 0;
  double min_clearance = std::numeric_limits<double>::infinity();  // over all frame boundaries
};

struct ResetEstimate {
  std::vector<int> per_path;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n-1); 0 for a single path
};

struct EpisodeOptions {
  // Rotates every random draw with a geometric meaning (start offset, headings, target offsets)
  // by this many counter-clockwise quarter turns about the room centre.
  int quarter_turns = 0;
  bool record_trace = false;
  std::optional<Vec2> start_pos;      // room coordinates; skips start sampling
  std::optional<Vec2> start_heading;  // unit vector, physical and virtual
  // Virtual-space targets relative to the start point, used before random targets.
  std::vector<Vec2> scripted_targets;
  std::optional<std::chrono::steady_clock::time_point> deadline;
};

// Sum over the four wall segments and each obstacle of w * (p - c) / |p - c|^(1 + e), with c the
// closest point of the element. Throws Error(InvalidPosition) when p is not in free space.
Vec2 apf_force(const Layout& layout, const SimConfig& cfg, Vec2 p);

// `turn_direction` is the sign of the virtual rotation applied this frame (0 when not turning).
GainSet select_gains(const UserState& state, Vec2 force, const SimConfig& cfg, bool walking,
                     int turn_direction = 0);

// Motion of one frame: virtual rotation toward `target`, then a virtual step when aligned.
// Physical motion follows from the gains chosen at the current physical position.
UserState step(const UserState& state, Vec2 target, const Layout& layout, const SimConfig& cfg);

// Applies explicit gains to an explicit virtual motion (radians, metres).
UserState advance(const UserState& state, double virt_rotation, double virt_translation,
                  const GainSet& gains, const SimConfig& cfg);

// Reset to gradient: triggers when the user is closer than reset_buffer to a wall or footprint
// and heading into it. The new physical heading is the force direction, nudged to the nearest
// direction that does not approach any element inside the buffer.
UserState check_and_reset(const UserState& state, const Layout& layout, const SimConfig& cfg);

EpisodeResult run_episode(const Layout& layout, const SimConfig& cfg, std::uint64_t seed,
                          const EpisodeOptions& options = {});

// Per-path seed is derive_seed(seed, path_index). Parallel over paths (OpenMP).
ResetEstimate estimate_resets(const Layout& layout, const SimConfig& cfg, int paths, std::uint64_t seed,
                              const EpisodeOptions& options = {});
// Sequential reference for estimate_resets.
ResetEstimate estimate_resets_serial(const Layout& layout, const SimConfig& cfg, int paths,
                                     std::uint64_t seed, const EpisodeOptions& options = {});

ResetEstimate summarize(std::vector<int> per_path);

// CSV with header step,phys_x,phys_y,virt_x,virt_y,resets (room coordinates for phys).
void write_trace_csv(std::ostream& out, const EpisodeResult& result);

// Correctly rounded sum (Shewchuk); independent of summation order.
double exact_sum(const double* values, std::size_t n);

}  // namespace roomroam
