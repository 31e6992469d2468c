"""POMDP wrapper: noisy slot observations, discrete target-speed actions, reward,
traffic graphs and the JSON-lines episode log."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import sim
from .errors import ContractViolation
from .sim import Style, World, WorldConfig

SLOT_FEATURES = 5  # x, y, vx, vy, present

R_GOAL = 2.0
R_FAIL = -2.0
R_SPEED = 0.01
SPEED_REF = 3.0


class Action(enum.IntEnum):
    STOP = 0
    CREEP = 1
    GO = 2

    @property
    def target_speed(self) -> float:
        return TARGET_SPEEDS[self]


TARGET_SPEEDS = {Action.STOP: 0.0, Action.CREEP: 0.5, Action.GO: 3.0}
N_ACTIONS = len(Action)


@dataclass
class TrafficGraph:
    nodes: list
    edges: list  # (src, dst): src influences dst

    def adjacency(self, n_slots: int) -> np.ndarray:
        """Dense matrix with ``adj[dst, src] = 1`` for every edge."""
        adj = np.zeros((n_slots, n_slots))
        for s, d in self.edges:
            adj[d, s] = 1.0
        return adj


@dataclass
class Observation:
    slots: np.ndarray  # (n_slots, 5); slot 0 is the ego
    ego_progress: float
    graph: TrafficGraph = field(default_factory=lambda: TrafficGraph([0], []))

    @property
    def present(self) -> np.ndarray:
        return self.slots[:, 4] > 0

    def flatten(self) -> np.ndarray:
        return flatten_observation(self)


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


def flatten_observation(obs: Observation) -> np.ndarray:
    """Fixed-length vector, ego slot first; each vehicle keeps its slot for life."""
    return obs.slots.reshape(-1).copy()


def reward(ego_speed: float, events: sim.StepEvents) -> float:
    r = R_SPEED * ego_speed / SPEED_REF
    if events.goal_reached:
        r += R_GOAL
    if events.collision:
        r += R_FAIL
    return r


def build_graph(world: World) -> TrafficGraph:
    """Influence graph over present vehicles.

    Each surrounding vehicle is influenced by its nearest same-lane leader and
    follower and by the ego; the ego is influenced by everyone.
    """
    nodes = [0] + [v.slot for v in world.state.surrounding]
    edges = []
    for lane in (sim.Lane.LOWER, sim.Lane.UPPER):
        ordered = world.lane_vehicles(lane)
        for i, veh in enumerate(ordered):
            if i > 0:
                edges.append((ordered[i - 1].slot, veh.slot))
            if i + 1 < len(ordered):
                edges.append((ordered[i + 1].slot, veh.slot))
            edges.append((0, veh.slot))
    for veh in sorted(world.state.surrounding, key=lambda v: v.slot):
        edges.append((veh.slot, 0))
    edges.sort()
    return TrafficGraph(sorted(nodes), edges)


def true_slots(world: World) -> np.ndarray:
    n = 1 + world.config.max_surrounding
    out = np.zeros((n, SLOT_FEATURES))
    out[0, :4] = world.ego_state().as_array()
    out[0, 4] = 1.0
    g = world.config.geometry
    for veh in world.state.surrounding:
        out[veh.slot, :4] = veh.state(g).as_array()
        out[veh.slot, 4] = 1.0
    return out


def true_latents(world: World) -> np.ndarray:
    """Per surrounding slot: 1 conservative, 0 aggressive, -1 empty."""
    out = -np.ones(world.config.max_surrounding, dtype=np.int64)
    for veh in world.state.surrounding:
        out[veh.slot - 1] = int(veh.profile.style)
    return out


class TIntersectionEnv:
    """Sequential reset/step protocol over one simulator instance."""

    def __init__(self, config: WorldConfig | None = None, seed: int | None = None):
        self.config = (config or WorldConfig()).validate()
        self.rng = np.random.default_rng(seed)
        self.world: World | None = None
        self.done = True

    @property
    def n_slots(self) -> int:
        return 1 + self.config.max_surrounding

    def seed(self, seed):
        self.rng = np.random.default_rng(seed)

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.seed(seed)
        self.world = sim.reset_world(self.config, self.rng)
        self.done = False
        return self._observe(), self._info(sim.StepEvents())

    def step(self, action) -> StepResult:
        if self.done:
            raise ContractViolation("step() called after the episode ended; call reset()")
        action = Action(int(action))
        _, events = sim.step_world(self.world, action.target_speed)
        self.done = events.terminal
        r = reward(self.world.state.ego_speed, events)
        return StepResult(self._observe(), r, self.done, self._info(events))

    def _observe(self) -> Observation:
        truth = true_slots(self.world)
        obs = truth.copy()
        sp, sv = self.config.noise_std
        present = truth[:, 4] > 0
        k = int(present.sum())
        noise = np.concatenate([self.rng.normal(0.0, sp, (k, 2)), self.rng.normal(0.0, sv, (k, 2))], axis=1)
        obs[present, :4] += noise
        return Observation(obs, self.world.state.ego_progress, build_graph(self.world))

    def _info(self, events: sim.StepEvents) -> dict:
        return {
            "true_latents": true_latents(self.world),
            "events": events,
            "true_state": true_slots(self.world),
            "ego_speed": self.world.state.ego_speed,
        }


def episode_record(t: int, obs: Observation, action, r: float, done: bool, latents: np.ndarray,
                   **extra) -> dict:
    """One JSON-lines record of the episode log."""
    rec = {
        "t": int(t),
        "obs": np.round(obs.slots, 6).tolist(),
        "action": None if action is None else int(action),
        "reward": float(r),
        "done": bool(done),
        "true_latents": [int(z) for z in latents],
        "graph_edges": [list(e) for e in obs.graph.edges],
    }
    rec.update(extra)
    return rec


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def style_name(z: int) -> str:
    return Style(z).name if z >= 0 else "ABSENT"
