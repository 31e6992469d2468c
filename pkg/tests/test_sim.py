"""Traffic simulator: IDM, driver profiles, notice/yield rules, ego control and stepping."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdrive.errors import ConfigError, ContractViolation, InputDomainError
from latentdrive.selfcheck import build_jam_world, check_idm_equilibrium
from latentdrive.sim import (DriverProfile, IdmParams, Lane, Style, SurroundingVehicle,
                             VehicleState, World, WorldConfig, WorldState, detect_collision,
                             ego_low_level_control, idm_acceleration, reset_world, safety_check,
                             sample_driver_profile, step_world, update_notice, with_gap_interval_length,
                             yielding_decision)

P = IdmParams()
G = WorldConfig().geometry


def quiet_config(**kw):
    return WorldConfig(accel_noise_std=0.0, noise_std=(0.0, 0.0), **kw)


def empty_world(cfg=None, progress=0.0, speed=0.0):
    cfg = cfg or quiet_config()
    w = World(cfg, np.random.default_rng(0))
    w.state = WorldState(ego_progress=progress, ego_speed=speed,
                         next_spawn_gap=[1e9, 1e9])
    return w


def vehicle(slot, lane, u, speed=3.0, style=Style.CONSERVATIVE, factor=0.6, noticed=False):
    return SurroundingVehicle(slot, lane, u, speed, DriverProfile(style, factor, noticed))


class TestIdm:
    def test_free_flow_equilibrium(self):
        assert abs(idm_acceleration(3.0, 1e6, 0.0, P)) < 1e-3

    def test_standing_start_on_empty_road(self):
        assert idm_acceleration(0.0, 1e6, 0.0, P) == pytest.approx(1.5, abs=1e-9)

    def test_gap_equal_to_desired_gap(self):
        s_star = P.min_spacing + 3.0 * P.headway_time
        assert idm_acceleration(3.0, s_star, 0.0, P) == pytest.approx(-1.5, abs=1e-12)

    def test_factor_scales_desired_gap(self):
        # at rest the desired gap is factor * s0; exactly that gap gives zero acceleration
        assert idm_acceleration(0.0, 0.6 * P.min_spacing, 0.0, P, 0.6) == pytest.approx(0.0, abs=1e-12)

    def test_clamped_to_emergency_decel(self):
        assert idm_acceleration(3.0, 0.01, 3.0, P) == -P.emergency_decel

    @pytest.mark.parametrize("args", [(math.nan, 10, 0), (1, math.inf, 0), (1, 10, math.nan),
                                      (1, 0.0, 0), (1, -1.0, 0), (-0.1, 10, 0)])
    def test_rejects_bad_inputs(self, args):
        with pytest.raises(InputDomainError):
            idm_acceleration(*args, P)

    @given(v=st.floats(0, 10), gap=st.floats(0.01, 1e4), dv=st.floats(-10, 10), f=st.floats(0.1, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_bounded(self, v, gap, dv, f):
        a = idm_acceleration(v, gap, dv, P, f)
        assert -P.emergency_decel <= a <= P.max_accel

    @given(v=st.floats(0, 3), gap=st.floats(0.5, 50), dv=st.floats(-3, 3))
    @settings(max_examples=200, deadline=None)
    def test_smaller_factor_never_brakes_harder(self, v, gap, dv):
        """Post-notice, a conservative factor (larger) asks for at least the aggressive gap."""
        assert idm_acceleration(v, gap, dv, P, 0.5) >= idm_acceleration(v, gap, dv, P, 0.8)


class TestDriverProfile:
    def test_all_conservative(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = sample_driver_profile(rng, 1.0, WorldConfig().gap_intervals)
            assert p.style is Style.CONSERVATIVE and 0.5 <= p.gap_factor <= 0.8

    def test_all_aggressive(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = sample_driver_profile(rng, 0.0, WorldConfig().gap_intervals)
            assert p.style is Style.AGGRESSIVE and 0.4 <= p.gap_factor <= 0.7

    def test_balanced_fraction(self):
        rng = np.random.default_rng(2)
        n = 10_000
        k = sum(sample_driver_profile(rng, 0.5, WorldConfig().gap_intervals).style is Style.CONSERVATIVE
                for _ in range(n))
        assert abs(k / n - 0.5) < 0.02

    def test_rejects_bad_probability(self):
        with pytest.raises(InputDomainError):
            sample_driver_profile(np.random.default_rng(0), 1.5, WorldConfig().gap_intervals)

    def test_gap_interval_resize_is_mean_preserving(self):
        cfg = with_gap_interval_length(WorldConfig(), 0.3)
        assert cfg.gap_intervals["conservative"] == pytest.approx((0.5, 0.8))
        assert cfg.gap_intervals["aggressive"] == pytest.approx((0.4, 0.7))
        cfg0 = with_gap_interval_length(WorldConfig(), 0.0)
        p = sample_driver_profile(np.random.default_rng(0), 1.0, cfg0.gap_intervals)
        assert p.gap_factor == pytest.approx(0.65)
        p = sample_driver_profile(np.random.default_rng(0), 0.0, cfg0.gap_intervals)
        assert p.gap_factor == pytest.approx(0.55)


class TestNoticeAndYield:
    def test_no_notice_at_start(self):
        w = empty_world()
        w.state.surrounding = [vehicle(1, Lane.LOWER, 10), vehicle(2, Lane.UPPER, 10)]
        update_notice(w)
        assert not any(v.profile.has_noticed_ego for v in w.state.surrounding)

    def test_notice_once_front_crosses_entry_line(self):
        # front reaches y=0 at progress 8 - 2 = 6
        w = empty_world(progress=6.5)
        w.state.surrounding = [vehicle(1, Lane.LOWER, 10), vehicle(2, Lane.UPPER, 10)]
        update_notice(w)
        assert all(v.profile.has_noticed_ego for v in w.state.surrounding)

    def test_notice_is_monotone(self):
        w = empty_world(progress=6.5, speed=0.0)
        w.state.surrounding = [vehicle(1, Lane.UPPER, 5)]
        step_world(w, 0.0)
        w.state.ego_progress = 0.0  # even if the ego were moved back
        for _ in range(5):
            step_world(w, 0.0)
            assert w.state.surrounding[0].profile.has_noticed_ego

    def test_aggressive_never_yields(self):
        prof = DriverProfile(Style.AGGRESSIVE, 0.5)
        for y in (-8.0, 0.0, 2.0, 6.0):
            assert not yielding_decision(prof, VehicleState(0, y, 0, 3), Lane.LOWER, G, y + 2)

    def test_conservative_yields_when_ego_in_lane(self):
        prof = DriverProfile(Style.CONSERVATIVE, 0.7)
        assert yielding_decision(prof, VehicleState(0, 2.0, 0, 0), Lane.LOWER, G, 4.0)
        assert yielding_decision(prof, VehicleState(3, 6.0, 0, 0), Lane.UPPER, G, 6.0)

    def test_conservative_ignores_ego_at_start(self):
        prof = DriverProfile(Style.CONSERVATIVE, 0.7)
        assert not yielding_decision(prof, VehicleState(0, -8.0, 0, 0), Lane.LOWER, G, -6.0)

    def test_conservative_yields_to_approaching_ego(self):
        prof = DriverProfile(Style.CONSERVATIVE, 0.7)
        assert yielding_decision(prof, VehicleState(0, -1.0, 0, 1.0), Lane.LOWER, G, 1.0)
        assert not yielding_decision(prof, VehicleState(0, -1.0, 0, 0.4), Lane.LOWER, G, 1.0)
        # approaching fast but still short of the entry line
        assert not yielding_decision(prof, VehicleState(0, -5.0, 0, 3.0), Lane.LOWER, G, -3.0)


class TestEgoControl:
    def test_zero_error_zero_accel(self):
        w = empty_world(speed=0.5)
        assert abs(ego_low_level_control(0.5, w)) < 1e-9

    def test_accel_saturates(self):
        assert ego_low_level_control(3.0, empty_world()) == pytest.approx(1.5)

    def test_empty_road_is_safe(self):
        assert not safety_check(empty_world(speed=3.0))

    def test_vehicle_just_ahead_triggers_brake(self):
        w = empty_world(progress=2.0, speed=1.0)
        ex, ey, _, _ = w.ego_pose()
        # lane vehicles sit at fixed y; emulate "0.5 m ahead" with a lower lane edge 0.5 m past the ego nose
        geom = replace(G, lower_lane_center_y=ey + 2 + 0.5 + 1.0, upper_lane_center_y=ey + 2 + 0.5 + 5.0,
                       ego_start_y=-8.0)
        cfg = quiet_config(geometry=geom)
        w = empty_world(cfg, progress=2.0, speed=1.0)
        w.state.surrounding = [vehicle(1, Lane.LOWER, geom.x_to_lane(Lane.LOWER, 0.0), speed=0.0)]
        assert safety_check(w)
        assert ego_low_level_control(3.0, w) == -P.emergency_decel

    def test_distant_vehicle_is_safe(self):
        w = empty_world(progress=0.0, speed=1.0)
        # 10 m ahead of the nose in the lane the ego heads into, closing at 1 m/s
        geom = G
        w.state.surrounding = [vehicle(1, Lane.LOWER, geom.x_to_lane(Lane.LOWER, 12.0), speed=1.0)]
        assert not safety_check(w)


class TestStepWorld:
    def test_stop_until_timeout(self):
        cfg = quiet_config()
        w = empty_world(cfg)
        for t in range(cfg.max_steps):
            _, ev = step_world(w, 0.0)
            assert not ev.collision and not ev.goal_reached
            assert ev.timeout == (t == cfg.max_steps - 1)
        assert w.state.ego_progress == 0.0
        with pytest.raises(ContractViolation):
            step_world(w, 0.0)

    def test_overlap_is_collision(self):
        w = empty_world(progress=9.5)
        ex, _, _, _ = w.ego_pose()
        w.state.surrounding = [vehicle(1, Lane.LOWER, G.x_to_lane(Lane.LOWER, ex), speed=0.0)]
        assert detect_collision(w)
        _, ev = step_world(w, 0.0)
        assert ev.collision and w.state.terminated

    def test_jam_equilibrium(self):
        ok, detail = check_idm_equilibrium()
        assert ok, detail

    def test_jam_spacing_constant(self):
        w = build_jam_world(0.7)
        gap0 = w.state.surrounding[0].u - w.state.surrounding[1].u
        for _ in range(100):
            step_world(w, 0.0)
        gap = w.state.surrounding[0].u - w.state.surrounding[1].u
        assert abs(gap - gap0) < 1e-6

    def test_determinism(self):
        def run(seed):
            w = reset_world(WorldConfig(), np.random.default_rng(seed))
            out = []
            acts = np.random.default_rng(99).choice([0.0, 0.5, 3.0], size=200)
            for a in acts:
                if w.state.terminated:
                    break
                step_world(w, a)
                out.append([(v.slot, v.u, v.speed) for v in w.state.surrounding] + [w.state.ego_progress])
            return out
        assert run(5) == run(5)
        assert run(5) != run(6)

    def test_pre_notice_independent_of_gap_factor(self):
        """Twin rollouts that differ only in gap factors agree while the ego stays back."""
        def run(factor):
            w = reset_world(WorldConfig(), np.random.default_rng(11))
            trace = []
            for _ in range(150):
                for v in w.state.surrounding:
                    v.profile.gap_factor = factor
                step_world(w, 0.0)
                trace.append([(v.slot, v.u, v.speed) for v in w.state.surrounding])
            return trace
        assert run(0.41) == run(0.79)

    def test_post_notice_depends_on_gap_factor(self):
        """Same twin setup with the ego past the entry line: trajectories diverge."""
        def run(factor):
            w = reset_world(WorldConfig(), np.random.default_rng(11))
            w.state.ego_progress = 7.0
            trace = []
            for _ in range(60):
                for v in w.state.surrounding:
                    v.profile.gap_factor = factor
                if w.state.terminated:
                    break
                step_world(w, 0.0)
                trace.append([(v.slot, v.u, v.speed) for v in w.state.surrounding])
            return trace
        assert run(0.41) != run(0.79)

    def test_slots_unique_and_stable(self):
        w = reset_world(WorldConfig(), np.random.default_rng(3))
        lane_of = {}
        alive = []
        for _ in range(200):
            if w.state.terminated:
                break
            step_world(w, 0.0)
            slots = [v.slot for v in w.state.surrounding]
            assert len(slots) == len(set(slots))
            assert all(1 <= s <= w.config.max_surrounding for s in slots)
            for v in w.state.surrounding:
                assert math.isfinite(v.u) and 0 <= v.speed <= 10
                if not any(v is a for a in alive):
                    alive.append(v)
                    lane_of[len(alive) - 1] = (v.slot, v.lane)
                k = next(i for i, a in enumerate(alive) if a is v)
                assert lane_of[k] == (v.slot, v.lane)

    def test_gap_factor_fixed_within_episode(self):
        w = reset_world(WorldConfig(), np.random.default_rng(4))
        seen = []  # (profile, factor at spawn); holding the profile keeps identities unique
        for _ in range(100):
            for v in w.state.surrounding:
                if not any(v.profile is p for p, _ in seen):
                    seen.append((v.profile, v.profile.gap_factor))
            if w.state.terminated:
                break
            step_world(w, 3.0)
        assert len(seen) > 8
        assert all(p.gap_factor == f for p, f in seen)

    def test_same_lane_order_preserved_without_noise(self):
        w = reset_world(quiet_config(), np.random.default_rng(8))
        for _ in range(200):
            if w.state.terminated:
                break
            before = {lane: [v.slot for v in w.lane_vehicles(lane)] for lane in Lane}
            step_world(w, 0.0)
            for lane in Lane:
                after = [v.slot for v in w.lane_vehicles(lane)]
                kept = [s for s in before[lane] if s in after]
                assert [s for s in after if s in kept] == kept


class TestConfig:
    @pytest.mark.parametrize("kw,key", [({"p_conservative": 1.2}, "world.p_conservative"),
                                        ({"dt": 0.0}, "world.dt"),
                                        ({"max_steps": 0}, "world.max_steps")])
    def test_invalid(self, kw, key):
        with pytest.raises(ConfigError) as exc:
            WorldConfig(**kw).validate()
        assert exc.value.key == key
