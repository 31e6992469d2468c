"""Ground-truth T-intersection world.

Two straight lanes run along x: the lower lane (centre y=+2) carries traffic
towards -x, the upper lane (centre y=+6) towards +x.  The ego vehicle comes up
a vertical approach from (0, -8), turns right on a quarter arc and merges into
the upper lane.  Surrounding vehicles follow IDM with a hidden driving style
that controls how far they close up once they notice the ego and whether they
yield to it.

Units are SI throughout (m, m/s, m/s^2, s).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractViolation, InputDomainError

SPEED_CLAMP = 10.0
NO_LEADER_GAP = 1e6
MIN_GAP = 1e-3
SWEEP_STEP = 0.5


class Style(enum.IntEnum):
    AGGRESSIVE = 0
    CONSERVATIVE = 1


class Lane(enum.IntEnum):
    LOWER = 0  # travels towards -x
    UPPER = 1  # travels towards +x


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 3.0
    max_accel: float = 1.5
    comfortable_decel: float = 2.0
    headway_time: float = 1.0
    min_spacing: float = 2.0
    accel_exponent: float = 4.0
    emergency_decel: float = 4.0

    @property
    def equilibrium_gap(self) -> float:
        """Bumper gap the model asks for when cruising at the desired speed."""
        return self.min_spacing + self.desired_speed * self.headway_time


@dataclass(frozen=True)
class Geometry:
    lane_width: float = 4.0
    lower_lane_center_y: float = 2.0
    upper_lane_center_y: float = 6.0
    ego_start_y: float = -8.0
    turn_radius: float = 6.0
    spawn_x_extent: float = 25.0
    merge_length: float = 4.0
    vehicle_length: float = 4.0
    vehicle_width: float = 2.0

    @property
    def entry_line_y(self) -> float:
        return self.lower_lane_center_y - self.lane_width / 2

    @property
    def lane_length(self) -> float:
        return 2 * self.spawn_x_extent

    def lane_center(self, lane: Lane) -> float:
        return self.lower_lane_center_y if lane == Lane.LOWER else self.upper_lane_center_y

    def lane_direction(self, lane: Lane) -> float:
        return -1.0 if lane == Lane.LOWER else 1.0

    def lane_to_x(self, lane: Lane, u: float) -> float:
        if lane == Lane.LOWER:
            return self.spawn_x_extent - u
        return -self.spawn_x_extent + u

    def x_to_lane(self, lane: Lane, x: float) -> float:
        if lane == Lane.LOWER:
            return self.spawn_x_extent - x
        return x + self.spawn_x_extent


def _default_gap_intervals():
    return {"conservative": (0.5, 0.8), "aggressive": (0.4, 0.7)}


@dataclass(frozen=True)
class WorldConfig:
    p_conservative: float = 0.5
    dt: float = 0.1
    max_steps: int = 200
    idm: IdmParams = field(default_factory=IdmParams)
    geometry: Geometry = field(default_factory=Geometry)
    noise_std: tuple = (0.1, 0.1)
    accel_noise_std: float = 0.1
    max_vehicles_per_lane: int = 4
    gap_intervals: dict = field(default_factory=_default_gap_intervals)
    kp: float = 2.0
    kd: float = 0.5
    safe_distance: float = 1.0
    safe_ttc: float = 1.0
    ego_max_speed: float = 3.0
    spawn_speed: float = 3.0

    def validate(self) -> "WorldConfig":
        if not 0.0 <= self.p_conservative <= 1.0:
            raise ConfigError("must lie in [0, 1]", "world.p_conservative")
        if not self.dt > 0:
            raise ConfigError("must be positive", "world.dt")
        if self.max_steps < 1:
            raise ConfigError("must be >= 1", "world.max_steps")
        for name in ("lane_width", "turn_radius", "spawn_x_extent", "merge_length",
                     "vehicle_length", "vehicle_width"):
            if not getattr(self.geometry, name) > 0:
                raise ConfigError("must be positive", f"world.geometry.{name}")
        if self.geometry.ego_start_y >= self.geometry.entry_line_y:
            raise ConfigError("ego must start below the entry line", "world.geometry.ego_start_y")
        if len(self.noise_std) != 2 or min(self.noise_std) < 0:
            raise ConfigError("expected two non-negative stds", "world.noise_std")
        if self.accel_noise_std < 0:
            raise ConfigError("must be non-negative", "world.accel_noise_std")
        if self.max_vehicles_per_lane < 0:
            raise ConfigError("must be non-negative", "world.max_vehicles_per_lane")
        if set(self.gap_intervals) != {"conservative", "aggressive"}:
            raise ConfigError("needs exactly 'conservative' and 'aggressive'", "world.gap_intervals")
        for style, (lo, hi) in self.gap_intervals.items():
            if not 0 < lo <= hi:
                raise ConfigError("need 0 < low <= high", f"world.gap_intervals.{style}")
        return self

    @property
    def max_surrounding(self) -> int:
        return 2 * self.max_vehicles_per_lane


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])


@dataclass
class DriverProfile:
    style: Style
    gap_factor: float
    has_noticed_ego: bool = False


@dataclass
class SurroundingVehicle:
    slot: int
    lane: Lane
    u: float  # centre position along the lane's travel direction, 0 at the upstream edge
    speed: float
    profile: DriverProfile

    def state(self, geom: Geometry) -> VehicleState:
        return VehicleState(geom.lane_to_x(self.lane, self.u), geom.lane_center(self.lane),
                            geom.lane_direction(self.lane) * self.speed, 0.0)


@dataclass
class StepEvents:
    collision: bool = False
    goal_reached: bool = False
    timeout: bool = False

    @property
    def terminal(self) -> bool:
        return self.collision or self.goal_reached or self.timeout


@dataclass
class WorldState:
    ego_progress: float
    ego_speed: float
    ego_accel_prev: float = 0.0
    surrounding: list = field(default_factory=list)
    step_count: int = 0
    terminated: bool = False
    next_spawn_gap: list = field(default_factory=lambda: [0.0, 0.0])
    vacated_slots: set = field(default_factory=set)


class EgoPath:
    """Straight approach, quarter-circle right turn, straight merge segment."""

    def __init__(self, geom: Geometry):
        self.geom = geom
        self.arc_start_y = geom.upper_lane_center_y - geom.turn_radius
        self.straight = self.arc_start_y - geom.ego_start_y
        if self.straight < 0:
            raise ConfigError("turn radius too large for the start position", "world.geometry.turn_radius")
        self.arc = geom.turn_radius * math.pi / 2
        self.length = self.straight + self.arc + geom.merge_length

    def pose(self, s: float):
        """Return (x, y, tx, ty): position and unit tangent at arc length ``s``."""
        g = self.geom
        s = min(max(s, 0.0), self.length)
        if s <= self.straight:
            return 0.0, g.ego_start_y + s, 0.0, 1.0
        s -= self.straight
        r = g.turn_radius
        if s <= self.arc:
            th = s / r
            return r - r * math.cos(th), self.arc_start_y + r * math.sin(th), math.sin(th), math.cos(th)
        s -= self.arc
        return r + s, self.arc_start_y + r, 1.0, 0.0


class World:
    """Mutable simulator instance; one per rollout worker."""

    def __init__(self, config: WorldConfig, rng: np.random.Generator):
        self.config = config.validate()
        self.rng = rng
        self.path = EgoPath(config.geometry)
        self.state = WorldState(ego_progress=0.0, ego_speed=0.0)

    # -- ego geometry -------------------------------------------------
    def ego_pose(self):
        return self.path.pose(self.state.ego_progress)

    def ego_state(self) -> VehicleState:
        x, y, tx, ty = self.ego_pose()
        v = self.state.ego_speed
        return VehicleState(x, y, v * tx, v * ty)

    def ego_front_y(self) -> float:
        _, y, _, ty = self.ego_pose()
        return y + ty * self.config.geometry.vehicle_length / 2

    def ego_rect(self):
        x, y, tx, ty = self.ego_pose()
        return _rect_corners(x, y, tx, ty, self.config.geometry)

    def vehicle_rect(self, veh: SurroundingVehicle):
        g = self.config.geometry
        return _rect_corners(g.lane_to_x(veh.lane, veh.u), g.lane_center(veh.lane),
                             g.lane_direction(veh.lane), 0.0, g)

    def lane_vehicles(self, lane: Lane):
        """Vehicles in ``lane`` ordered front (largest u) to back."""
        vs = [v for v in self.state.surrounding if v.lane == lane]
        vs.sort(key=lambda v: -v.u)
        return vs

    def path_complete(self) -> bool:
        return self.state.ego_progress >= self.path.length


def _rect_corners(cx, cy, tx, ty, geom: Geometry):
    hl, hw = geom.vehicle_length / 2, geom.vehicle_width / 2
    nx, ny = -ty, tx
    return [
        (cx + hl * tx + hw * nx, cy + hl * ty + hw * ny),
        (cx - hl * tx + hw * nx, cy - hl * ty + hw * ny),
        (cx - hl * tx - hw * nx, cy - hl * ty - hw * ny),
        (cx + hl * tx - hw * nx, cy + hl * ty - hw * ny),
    ]


def _axes(rect):
    out = []
    for i in range(2):
        (x0, y0), (x1, y1) = rect[i], rect[i + 1]
        dx, dy = x1 - x0, y1 - y0
        n = math.hypot(dx, dy)
        out.append((dx / n, dy / n))
    return out


def rects_overlap(a, b) -> bool:
    """Separating-axis test for two convex quadrilaterals (strict overlap)."""
    for ax, ay in _axes(a) + _axes(b):
        pa = [x * ax + y * ay for x, y in a]
        pb = [x * ax + y * ay for x, y in b]
        if max(pa) <= min(pb) or max(pb) <= min(pa):
            return False
    return True


def _point_segment(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return math.hypot(px - ax - t * dx, py - ay - t * dy)


def rect_distance(a, b) -> float:
    """Euclidean distance between two convex quadrilaterals (0 when they overlap)."""
    if rects_overlap(a, b):
        return 0.0
    best = math.inf
    for p, q in ((a, b), (b, a)):
        for px, py in p:
            for i in range(4):
                ax, ay = q[i]
                bx, by = q[(i + 1) % 4]
                best = min(best, _point_segment(px, py, ax, ay, bx, by))
    return best


# -- driver model ---------------------------------------------------------

def idm_acceleration(v: float, gap: float, dv: float, params: IdmParams,
                     gap_factor_applied: float = 1.0) -> float:
    """IDM acceleration with the whole desired gap scaled by ``gap_factor_applied``.

    ``dv`` is the closing speed (own speed minus leader speed).  The dynamic
    term of the desired gap is floored at zero so a receding leader never
    produces braking, and the result is clamped to
    ``[-emergency_decel, max_accel]``.
    """
    for name, val in (("v", v), ("gap", gap), ("dv", dv), ("gap_factor", gap_factor_applied)):
        if not math.isfinite(val):
            raise InputDomainError(f"{name} must be finite, got {val}")
    if gap <= 0:
        raise InputDomainError(f"gap must be positive, got {gap}")
    if v < 0:
        raise InputDomainError(f"v must be non-negative, got {v}")
    p = params
    dynamic = v * p.headway_time + v * dv / (2 * math.sqrt(p.max_accel * p.comfortable_decel))
    s_star = gap_factor_applied * (p.min_spacing + max(0.0, dynamic))
    a = p.max_accel * (1 - (v / p.desired_speed) ** p.accel_exponent - (s_star / gap) ** 2)
    return min(max(a, -p.emergency_decel), p.max_accel)


def sample_driver_profile(rng: np.random.Generator, p_conservative: float,
                          gap_intervals: dict) -> DriverProfile:
    if not 0.0 <= p_conservative <= 1.0:
        raise InputDomainError(f"p_conservative must lie in [0, 1], got {p_conservative}")
    style = Style.CONSERVATIVE if rng.random() < p_conservative else Style.AGGRESSIVE
    lo, hi = gap_intervals[style.name.lower()]
    return DriverProfile(style, float(rng.uniform(lo, hi)) if hi > lo else float(lo))


def update_notice(world: World) -> World:
    """Every driver notices the ego once its front crosses the entry line; never reset."""
    if world.ego_front_y() >= world.config.geometry.entry_line_y:
        for veh in world.state.surrounding:
            veh.profile.has_noticed_ego = True
    return world


def yielding_decision(profile: DriverProfile, ego: VehicleState, lane: Lane,
                      geom: Geometry, ego_front_y: float | None = None) -> bool:
    """Whether a driver in ``lane`` treats the ego as its leader.

    Conservative drivers yield when the ego is laterally inside their lane, or
    when it is past the entry line, short of the lane centre and moving towards
    it faster than 0.5 m/s.  Aggressive drivers never yield.
    """
    if profile.style == Style.AGGRESSIVE:
        return False
    center = geom.lane_center(lane)
    if abs(ego.y - center) < geom.lane_width / 2:
        return True
    if ego_front_y is None:
        ego_front_y = ego.y
    toward = math.copysign(1.0, center - ego.y)
    lateral_speed = ego.vy * toward
    between = ego_front_y >= geom.entry_line_y and ego.y < center
    return lateral_speed > 0.5 and between


def safety_check(world: World) -> bool:
    """Emergency-brake trigger for the ego.

    Sweeps the ego rectangle forward along its path by up to
    ``safe_distance + ego_speed * safe_ttc`` metres and fires if any surrounding
    vehicle, held at its current position, overlaps the swept footprint.
    Vehicles beside or behind the ego never fire it: braking cannot clear them.
    """
    cfg = world.config
    g = cfg.geometry
    st = world.state
    look = cfg.safe_distance + st.ego_speed * cfg.safe_ttc
    ex, ey, _, _ = world.ego_pose()
    reach = math.hypot(g.vehicle_length, g.vehicle_width) + look
    near = [v for v in st.surrounding
            if math.hypot(g.lane_to_x(v.lane, v.u) - ex, g.lane_center(v.lane) - ey) < reach]
    if not near:
        return False
    n = max(2, int(math.ceil(look / SWEEP_STEP)) + 1)
    rects = [world.vehicle_rect(v) for v in near]
    for k in range(1, n + 1):
        x, y, tx, ty = world.path.pose(st.ego_progress + look * k / n)
        ego_rect = _rect_corners(x, y, tx, ty, g)
        for rect in rects:
            if rects_overlap(ego_rect, rect):
                return True
    return False


def ego_low_level_control(target_speed: float, world: World) -> float:
    """PD speed tracking along the turn path, overridden by the safety brake."""
    cfg = world.config
    if safety_check(world):
        return -cfg.idm.emergency_decel
    st = world.state
    a = cfg.kp * (target_speed - st.ego_speed) - cfg.kd * st.ego_accel_prev
    return min(max(a, -cfg.idm.emergency_decel), cfg.idm.max_accel)


# -- world lifecycle ------------------------------------------------------

def reset_world(config: WorldConfig, rng: np.random.Generator) -> World:
    """Fresh world drawn from the initial-state distribution."""
    world = World(config, rng)
    g, p = config.geometry, config.idm
    slot = 1
    for lane in (Lane.LOWER, Lane.UPPER):
        count = 0
        u = float(rng.uniform(0.5, 1.0)) * g.lane_length
        while u >= 0 and count < config.max_vehicles_per_lane:
            prof = sample_driver_profile(rng, config.p_conservative, config.gap_intervals)
            world.state.surrounding.append(SurroundingVehicle(slot, lane, u, config.spawn_speed, prof))
            slot += 1
            count += 1
            u -= g.vehicle_length + p.equilibrium_gap * float(rng.uniform(1.0, 1.5))
        world.state.next_spawn_gap[lane] = p.equilibrium_gap * float(rng.uniform(1.0, 1.5))
    return world


def _ego_as_leader(world: World, veh: SurroundingVehicle, ego: VehicleState, tx: float, ty: float):
    """Gap and speed of the ego projected onto ``veh``'s lane axis, or None if not ahead."""
    g = world.config.geometry
    u_ego = g.x_to_lane(veh.lane, ego.x)
    if u_ego <= veh.u:
        return None
    extent = g.vehicle_length / 2 * abs(tx) + g.vehicle_width / 2 * abs(ty)
    gap = u_ego - extent - (veh.u + g.vehicle_length / 2)
    return gap, g.lane_direction(veh.lane) * ego.vx


def _surrounding_accels(world: World) -> dict:
    cfg = world.config
    g, p = cfg.geometry, cfg.idm
    ego = world.ego_state()
    _, _, tx, ty = world.ego_pose()
    front_y = world.ego_front_y()
    accel = {}
    for lane in (Lane.LOWER, Lane.UPPER):
        ordered = world.lane_vehicles(lane)
        for i, veh in enumerate(ordered):
            if i > 0:
                lead = ordered[i - 1]
                gap = lead.u - veh.u - g.vehicle_length
                lead_speed = lead.speed
            else:
                gap, lead_speed = NO_LEADER_GAP, veh.speed
            if yielding_decision(veh.profile, ego, lane, g, front_y):
                cand = _ego_as_leader(world, veh, ego, tx, ty)
                if cand is not None and cand[0] <= gap:
                    gap, lead_speed = cand
            factor = veh.profile.gap_factor if veh.profile.has_noticed_ego else 1.0
            accel[veh.slot] = idm_acceleration(veh.speed, max(gap, MIN_GAP), veh.speed - lead_speed,
                                               p, factor)
    noise = cfg.accel_noise_std
    for slot in sorted(accel):
        if noise > 0:
            accel[slot] += float(world.rng.normal(0.0, noise))
    return accel


def _spawn_and_despawn(world: World):
    cfg = world.config
    g, p = cfg.geometry, cfg.idm
    st = world.state
    occupied_before = {v.slot for v in st.surrounding}
    kept = [v for v in st.surrounding if v.u - g.vehicle_length / 2 <= g.lane_length]
    st.surrounding = kept
    blocked = occupied_before  # slots vacated this step stay empty for one observation
    free = [s for s in range(1, cfg.max_surrounding + 1) if s not in blocked]
    for lane in (Lane.LOWER, Lane.UPPER):
        ordered = world.lane_vehicles(lane)
        if len(ordered) >= cfg.max_vehicles_per_lane:
            continue
        if ordered and ordered[-1].u - g.vehicle_length < st.next_spawn_gap[lane]:
            continue
        if not free:
            continue  # deferred until a slot frees up
        prof = sample_driver_profile(world.rng, cfg.p_conservative, cfg.gap_intervals)
        prof.has_noticed_ego = world.ego_front_y() >= g.entry_line_y
        st.surrounding.append(SurroundingVehicle(free.pop(0), lane, 0.0, cfg.spawn_speed, prof))
        st.next_spawn_gap[lane] = p.equilibrium_gap * float(world.rng.uniform(1.0, 1.5))
    st.surrounding.sort(key=lambda v: v.slot)


def detect_collision(world: World) -> bool:
    ego_rect = world.ego_rect()
    ex, ey, _, _ = world.ego_pose()
    g = world.config.geometry
    reach = math.hypot(g.vehicle_length, g.vehicle_width)
    for veh in world.state.surrounding:
        if math.hypot(g.lane_to_x(veh.lane, veh.u) - ex, g.lane_center(veh.lane) - ey) >= reach:
            continue
        if rects_overlap(ego_rect, world.vehicle_rect(veh)):
            return True
    return False


def step_world(world: World, ego_target_speed: float, rng: np.random.Generator | None = None):
    """Advance one tick in place; returns ``(world, StepEvents)``."""
    st = world.state
    if st.terminated:
        raise ContractViolation("step_world called on a terminated episode")
    if rng is not None:
        world.rng = rng
    cfg = world.config
    update_notice(world)
    accel = _surrounding_accels(world)
    ego_a = ego_low_level_control(ego_target_speed, world)

    dt = cfg.dt
    for veh in st.surrounding:
        veh.u += veh.speed * dt
        veh.speed = min(max(veh.speed + accel[veh.slot] * dt, 0.0), SPEED_CLAMP)
    st.ego_progress += st.ego_speed * dt
    st.ego_speed = min(max(st.ego_speed + ego_a * dt, 0.0), min(cfg.ego_max_speed, SPEED_CLAMP))
    st.ego_accel_prev = ego_a

    _spawn_and_despawn(world)
    st.step_count += 1
    events = StepEvents()
    events.collision = detect_collision(world)
    events.goal_reached = not events.collision and world.path_complete()
    events.timeout = not (events.collision or events.goal_reached) and st.step_count >= cfg.max_steps
    st.terminated = events.terminal
    return world, events


def with_gap_interval_length(config: WorldConfig, length: float) -> WorldConfig:
    """Mean-preserving resize of both styles' gap-factor intervals."""
    if length < 0:
        raise InputDomainError(f"interval length must be non-negative, got {length}")
    out = {}
    for style, (lo, hi) in config.gap_intervals.items():
        m = (lo + hi) / 2
        out[style] = (m - length / 2, m + length / 2)
    return replace(config, gap_intervals=out)
