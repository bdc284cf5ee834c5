#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "roomroam/rdwsim.hpp"
#include "test_util.hpp"

using namespace roomroam;
using namespace roomroam::testing;

namespace {

Layout empty_room(double side = 5.0) {
  Layout l;
  l.room = square_room(side);
  return l;
}

// 5 m room with one 1 m x 1 m box in the middle.
Layout centre_box() {
  static const Catalog cat({{FurnitureKind::MiniFridge, {0.5, 0.5}}});
  Layout l = empty_room();
  l.objects.push_back(place(FurnitureKind::MiniFridge, {2.5, 2.5}, 0, cat));
  return l;
}

Vec2 term(Vec2 p, Vec2 c) {
  const Vec2 d = p - c;
  const double r = norm(d);
  return d * (1.0 / (r * r * r));
}

UserState at(Vec2 pos, Vec2 heading) {
  UserState s;
  s.phys_pos = pos;
  s.phys_heading = heading;
  s.virt_heading = heading;
  return s;
}

SimConfig short_episodes(double distance = 60.0) {
  SimConfig c;
  c.episode_distance = distance;
  return c;
}

}  // namespace

TEST(SimConfig, Validation) {
  EXPECT_EQ(code_of([] { SimConfig{}.validate(); }), std::nullopt);
  SimConfig c;
  c.trans_gain = {1.1, 1.3};
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::Config);
  c = {};
  c.dt = 0.0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::Config);
  c = {};
  c.reset_buffer = 2.5;
  const Rect room = square_room(5.0);
  EXPECT_EQ(code_of([&] { c.validate(&room); }), ErrorCode::Config);
}

TEST(ApfForce, CentreOfEmptyRoomIsZero) {
  const Vec2 f = apf_force(empty_room(), SimConfig{}, {2.5, 2.5});
  EXPECT_EQ(f.x, 0.0);
  EXPECT_EQ(f.y, 0.0);
}

TEST(ApfForce, NearRightWallPointsInward) {
  const Vec2 f = apf_force(empty_room(), SimConfig{}, {4.8, 2.5});
  EXPECT_LT(f.x, 0.0);
  EXPECT_LT(std::abs(f.y), 1e-9);
}

TEST(ApfForce, MatchesClosedFormTerms) {
  const Vec2 p{1.0, 2.5};
  // Closest points: left, right, bottom and top walls, then the box face at x = 2.
  const Vec2 expected = term(p, {0.0, 2.5}) + term(p, {5.0, 2.5}) + term(p, {1.0, 0.0}) + term(p, {1.0, 5.0}) +
                        term(p, {2.0, 2.5});
  const Vec2 f = apf_force(centre_box(), SimConfig{}, p);
  EXPECT_NEAR(f.x, expected.x, 1e-12);
  EXPECT_NEAR(f.y, expected.y, 1e-12);
}

TEST(ApfForce, RejectsPositionsOutsideFreeSpace) {
  EXPECT_EQ(code_of([] { apf_force(centre_box(), SimConfig{}, {2.5, 2.5}); }), ErrorCode::InvalidPosition);
  EXPECT_EQ(code_of([] { apf_force(centre_box(), SimConfig{}, {-0.1, 2.5}); }), ErrorCode::InvalidPosition);
}

TEST(SelectGains, AlignedOpposedAndIdle) {
  const SimConfig cfg;
  const auto along = select_gains(at({}, {1, 0}), {2.0, 0.0}, cfg, true);
  EXPECT_EQ(along.translation, 1.26);
  EXPECT_EQ(along.curvature_sign, 1);
  const auto opposed = select_gains(at({}, {1, 0}), {-2.0, 0.0}, cfg, true);
  EXPECT_EQ(opposed.translation, 0.86);
  const auto idle = select_gains(at({}, {1, 0}), {0.0, 0.0}, cfg, true, 1);
  EXPECT_EQ(idle.translation, 1.0);
  EXPECT_EQ(idle.rotation, 1.0);
  EXPECT_EQ(idle.curvature_sign, 0);
}

TEST(SelectGains, CurvatureSteersTowardForce) {
  const SimConfig cfg;
  EXPECT_EQ(select_gains(at({}, {1, 0}), {0.0, 1.0}, cfg, true).curvature_sign, 1);
  EXPECT_EQ(select_gains(at({}, {1, 0}), {0.0, -1.0}, cfg, true).curvature_sign, -1);
  EXPECT_EQ(select_gains(at({}, {1, 0}), {0.0, 1.0}, SimConfig::without_redirection(), true).curvature_sign, 0);
}

TEST(SelectGains, RotationGainFollowsTurnDirection) {
  const SimConfig cfg;
  // Force to the left: turning left is toward it and gets the larger gain.
  EXPECT_EQ(select_gains(at({}, {1, 0}), {0.0, 1.0}, cfg, false, 1).rotation, 1.24);
  EXPECT_EQ(select_gains(at({}, {1, 0}), {0.0, 1.0}, cfg, false, -1).rotation, 0.67);
  EXPECT_EQ(code_of([&] { select_gains(at({}, {1, 0}), {NAN, 1.0}, cfg, false); }), ErrorCode::InvalidInput);
}

TEST(Step, UnitGainsMovePhysicalLikeVirtual) {
  const auto cfg = SimConfig::without_redirection();
  UserState s = at({2.5, 2.5}, {1, 0});
  s.virt_pos = {0.0, 0.0};
  for (int i = 0; i < 50; ++i) {
    const UserState next = step(s, {10.0, 0.0}, empty_room(), cfg);
    EXPECT_NEAR(next.phys_pos.x - s.phys_pos.x, next.virt_pos.x - s.virt_pos.x, 1e-15);
    EXPECT_NEAR(next.phys_pos.y - s.phys_pos.y, next.virt_pos.y - s.virt_pos.y, 1e-15);
    s = next;
  }
  EXPECT_NEAR(s.virt_distance_walked, 50 * cfg.walk_speed * cfg.dt, 1e-12);
}

TEST(Step, TurnsBeforeWalking) {
  const auto cfg = SimConfig::without_redirection();
  const UserState s = at({2.5, 2.5}, {1, 0});
  const UserState next = step(s, {0.0, 5.0}, empty_room(), cfg);
  EXPECT_EQ(next.virt_distance_walked, 0.0);
  EXPECT_NEAR(next.virt_heading_angle(), cfg.turn_speed * cfg.dt * std::numbers::pi / 180.0, 1e-12);
}

TEST(Advance, RotationGainScalesPhysicalTurn) {
  GainSet g;
  g.rotation = 1.24;
  UserState s = at({}, {1, 0});
  const int n = 360;
  double phys_turn = 0.0;
  for (int i = 0; i < n; ++i) {
    const UserState next = advance(s, 2.0 * std::numbers::pi / n, 0.0, g, SimConfig{});
    phys_turn += std::atan2(cross(s.phys_heading, next.phys_heading), dot(s.phys_heading, next.phys_heading));
    s = next;
  }
  EXPECT_NEAR(phys_turn * 180.0 / std::numbers::pi, 360.0 / 1.24, 1e-9);
  EXPECT_NEAR(s.virt_heading.x, 1.0, 1e-12);
}

TEST(Advance, CurvatureTracesAnArc) {
  const SimConfig cfg;
  GainSet g;
  g.curvature_sign = 1;
  UserState s = at({}, {1, 0});
  const double ds = cfg.walk_speed * cfg.dt;
  const int n = 270;  // 4.2 m
  for (int i = 0; i < n; ++i) s = advance(s, 0.0, ds, g, cfg);
  const double len = n * ds;
  const double R = cfg.curvature_radius;
  EXPECT_NEAR(s.phys_heading_angle(), len / R, 1e-9);
  // Position seen from the arc centre (0, R).
  const double angle = std::atan2(s.phys_pos.x, R - s.phys_pos.y);
  EXPECT_NEAR(angle, len / R, 1e-3);
  // Each Euler step leaves the circle by about ds^2 / (2R).
  EXPECT_NEAR(distance(s.phys_pos, {0.0, R}), R, n * ds * ds / R);
  EXPECT_NEAR(s.virt_pos.x, len, 1e-12);
  EXPECT_EQ(s.virt_pos.y, 0.0);
}

TEST(CheckAndReset, CentreIsUntouched) {
  const UserState s = at({2.5, 2.5}, {1, 0});
  const UserState r = check_and_reset(s, empty_room(), SimConfig{});
  EXPECT_EQ(r.resets, 0);
  EXPECT_EQ(r.phys_heading, s.phys_heading);
}

TEST(CheckAndReset, NearWallTurnsAround) {
  const UserState r = check_and_reset(at({4.9, 2.5}, {1, 0}), empty_room(), SimConfig{});
  EXPECT_EQ(r.resets, 1);
  EXPECT_NEAR(r.phys_heading.x, -1.0, 1e-12);
  EXPECT_NEAR(r.phys_heading.y, 0.0, 1e-12);
  // Already walking away from the wall: no reset.
  EXPECT_EQ(check_and_reset(at({4.9, 2.5}, {-1, 0}), empty_room(), SimConfig{}).resets, 0);
}

TEST(CheckAndReset, CornerFollowsBisector) {
  const double h = std::sqrt(0.5);
  const UserState r = check_and_reset(at({4.9, 4.9}, {h, h}), empty_room(), SimConfig{});
  EXPECT_EQ(r.resets, 1);
  EXPECT_NEAR(r.phys_heading.x, -h, 1e-9);
  EXPECT_NEAR(r.phys_heading.y, -h, 1e-9);
}

TEST(RunEpisode, ZeroDistance) {
  const auto r = run_episode(empty_room(), short_episodes(0.0), 1);
  EXPECT_EQ(r.resets, 0);
  EXPECT_EQ(r.distance, 0.0);
}

TEST(RunEpisode, ScriptedStraightWalkHasTwoResets) {
  SimConfig cfg = SimConfig::without_redirection();
  cfg.episode_distance = 10.0;
  EpisodeOptions o;
  o.start_pos = Vec2{2.5, 2.5};
  o.start_heading = Vec2{1.0, 0.0};
  o.scripted_targets = {Vec2{10.0, 0.0}};
  EXPECT_EQ(run_episode(empty_room(), cfg, 3, o).resets, 2);
}

TEST(RunEpisode, DeterministicForSeed) {
  const Layout l = sample_layout(4, 4);
  EpisodeOptions o;
  o.record_trace = true;
  const auto a = run_episode(l, short_episodes(), 99, o);
  const auto b = run_episode(l, short_episodes(), 99, o);
  EXPECT_EQ(a.resets, b.resets);
  EXPECT_EQ(a.distance, b.distance);
  EXPECT_EQ(a.frames, b.frames);
  ASSERT_EQ(a.phys_trace.size(), b.phys_trace.size());
  for (std::size_t i = 0; i < a.phys_trace.size(); ++i) EXPECT_EQ(a.phys_trace[i].phys, b.phys_trace[i].phys);
}

TEST(RunEpisode, SafetyGainBoundsAndDistance) {
  const SimConfig cfg = short_episodes(120.0);
  for (int i = 0; i < 12; ++i) {
    const Layout l = sample_layout(derive_seed(21, i), 3 + i % 3);
    const auto r = run_episode(l, cfg, derive_seed(22, i));
    EXPECT_GE(r.min_clearance, 0.0);
    EXPECT_GE(r.resets, 0);
    EXPECT_GE(r.distance, cfg.episode_distance);
    EXPECT_LE(r.distance, cfg.episode_distance + cfg.walk_speed * cfg.dt + 1e-9);
    EXPECT_GE(r.gains.min_translation, 0.86);
    EXPECT_LE(r.gains.max_translation, 1.26);
    EXPECT_GE(r.gains.min_rotation, 0.67);
    EXPECT_LE(r.gains.max_rotation, 1.24);
    EXPECT_LE(r.gains.max_abs_curvature, 1.0 / 7.5);
  }
}

TEST(RunEpisode, QuarterTurnRotatesTraceExactly) {
  const Layout l = sample_layout(31, 5);
  const Layout t = rotate_layout_90(l);
  EpisodeOptions o;
  o.record_trace = true;
  EpisodeOptions ot = o;
  ot.quarter_turns = 1;
  const auto a = run_episode(l, short_episodes(), 5, o);
  const auto b = run_episode(t, short_episodes(), 5, ot);
  EXPECT_EQ(a.resets, b.resets);
  ASSERT_EQ(a.phys_trace.size(), b.phys_trace.size());
  // Exact in room-centred coordinates; the trace is stored in room coordinates, one rounding away.
  const Vec2 c = l.room.center();
  for (std::size_t i = 0; i < a.phys_trace.size(); ++i) {
    const Vec2 want = c + rotate_quarter(a.phys_trace[i].phys - c, 1);
    ASSERT_NEAR(b.phys_trace[i].phys.x, want.x, 4e-15) << "frame " << i;
    ASSERT_NEAR(b.phys_trace[i].phys.y, want.y, 4e-15) << "frame " << i;
    ASSERT_EQ(b.phys_trace[i].resets, a.phys_trace[i].resets);
  }
}

TEST(RunEpisode, DeadlineRaisesTimeout) {
  EpisodeOptions o;
  o.deadline = std::chrono::steady_clock::now() - std::chrono::seconds(1);
  EXPECT_EQ(code_of([&] { run_episode(sample_layout(1, 3), SimConfig{}, 1, o); }), ErrorCode::Timeout);
}

TEST(RunEpisode, TraceCsvHeader) {
  EpisodeOptions o;
  o.record_trace = true;
  std::ostringstream ss;
  write_trace_csv(ss, run_episode(empty_room(), short_episodes(1.0), 1, o));
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "step,phys_x,phys_y,virt_x,virt_y,resets");
}

TEST(EstimateResets, SinglePathMatchesEpisode) {
  const Layout l = sample_layout(7, 3);
  const auto est = estimate_resets(l, short_episodes(), 1, 1234);
  ASSERT_EQ(est.per_path.size(), 1u);
  EXPECT_EQ(est.per_path[0], run_episode(l, short_episodes(), derive_seed(1234, 0)).resets);
  EXPECT_EQ(est.std, 0.0);
}

TEST(EstimateResets, MeanOfPaths) {
  const auto est = estimate_resets(sample_layout(8, 4), short_episodes(30.0), 30, 77);
  ASSERT_EQ(est.per_path.size(), 30u);
  double sum = 0.0;
  for (int r : est.per_path) sum += r;
  EXPECT_DOUBLE_EQ(est.mean, sum / 30.0);
}

TEST(EstimateResets, ParallelMatchesSerial) {
  const Layout l = sample_layout(9, 5);
  const auto a = estimate_resets(l, short_episodes(30.0), 12, 5);
  const auto b = estimate_resets_serial(l, short_episodes(30.0), 12, 5);
  EXPECT_EQ(a.per_path, b.per_path);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.std, b.std);
}

TEST(EstimateResets, BlockedLayoutIsInfeasible) {
  static const Catalog cat({{FurnitureKind::Sofa, {0.5, 0.5}}});
  Layout l;
  l.room = square_room(1.0);
  l.objects.push_back(place(FurnitureKind::Sofa, {0.5, 0.5}, 0, cat));
  SimConfig cfg;
  cfg.reset_buffer = 0.1;
  EXPECT_EQ(code_of([&] { estimate_resets(l, cfg, 2, 1); }), ErrorCode::InfeasibleLayout);
}

TEST(Summarize, SampleStandardDeviation) {
  const auto s = summarize({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-15);
}

TEST(ExactSum, OrderIndependent) {
  const double v[] = {1e16, 1.0, -1e16, 1e-3};
  EXPECT_EQ(exact_sum(v, 4), 1.001);
  const double w[] = {1e-3, -1e16, 1.0, 1e16};
  EXPECT_EQ(exact_sum(w, 4), exact_sum(v, 4));
}
