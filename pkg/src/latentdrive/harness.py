"""Experiment drivers: training loops with metrics/checkpoints, multi-variant
comparisons, robustness sweeps, inference-only studies and interpretability dumps.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .env import TIntersectionEnv, episode_record, write_jsonl
from .errors import CheckpointError, ConfigError
from .nn.autodiff import Adam
from .nn.checkpoint import load_into, read_checkpoint, save_checkpoint
from .nn.networks import Head, NetKind, build_network, default_spec
from .sim import WorldConfig, with_gap_interval_length
from .trainer import (AgentBundle, CreepThenGo, EpochStats, Mode, TrainConfig,
                      collect_rollouts, evaluate, inference_accuracy_on, inference_update,
                      obs_input, train_epoch)

log = logging.getLogger(__name__)

METRIC_FIELDS = EpochStats.FIELDS
SWEEP_FIELDS = ("axis_value", "variant", "seed", "success_rate", "inference_accuracy", "relative_success")
INFERENCE_ONLY = "INFERENCE_ONLY"


class MetricsWriter:
    """Append-only metrics CSV, flushed after every row."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
        self._w.writeheader()
        self._fh.flush()

    def write(self, stats: EpochStats):
        self._w.writerow({k: _fmt(v) for k, v in stats.row().items()})
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return v


# -- checkpoints ------------------------------------------------------------

def save_bundle(path, bundle: AgentBundle, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    meta.update(mode=bundle.mode.value, train=bundle.config.to_dict())
    return save_checkpoint(path, bundle.parameters(), bundle.specs(), meta)


def load_bundle(path, expected: AgentBundle | None = None) -> AgentBundle:
    """Rebuild an AgentBundle from a checkpoint.

    With ``expected``, parameters are loaded into that bundle instead, and any
    name/shape difference is reported.
    """
    header, arrays = read_checkpoint(path)
    mode = header["meta"].get("mode")
    if mode == INFERENCE_ONLY:
        raise CheckpointError(f"{path} holds only an inference network; use load_inference_net")
    if expected is None:
        specs = header["specs"]
        tc = TrainConfig(**{k: v for k, v in header["meta"].get("train", {}).items()}).validate()
        if "shared" in specs:
            net = build_network(specs["shared"])
            expected = AgentBundle(Mode(mode), net, net, tc)
        else:
            expected = AgentBundle(Mode(mode), build_network(specs["policy"]),
                                   build_network(specs["inference"]), tc)
    load_into(expected.parameters(), arrays)
    return expected


def save_inference_net(path, net, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    meta["mode"] = INFERENCE_ONLY
    return save_checkpoint(path, net.parameter_set("inference"), {"inference": net.spec}, meta)


def load_inference_net(path):
    header, arrays = read_checkpoint(path)
    if "inference" not in header["specs"]:
        raise CheckpointError(f"{path} has no separate inference network")
    net = build_network(header["specs"]["inference"])
    params = net.parameter_set("inference")
    load_into(params, {k: v for k, v in arrays.items() if k.startswith("inference/")})
    return net


# -- training loop ------------------------------------------------------------

def eval_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), 0xE7A1])


def train_run(bundle: AgentBundle, world: WorldConfig, config: TrainConfig, out_dir,
              ckpt_prefix: str = "ckpt", metrics_name: str = "metrics.csv", progress=None):
    """Train for ``config.epochs`` epochs writing metrics and checkpoints to ``out_dir``.

    Evaluation runs every ``eval_every`` epochs and after the last one; with zero
    epochs only the untrained networks are evaluated.  Returns the last EpochStats.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = TIntersectionEnv(world, seed=config.seed)
    rng = np.random.default_rng([config.seed, 0x7A1])
    torch.manual_seed(config.seed)
    meta = {"world": world_to_dict(world), "seed": config.seed}
    last = EpochStats()
    with MetricsWriter(out / metrics_name) as mw:
        if config.epochs == 0:
            res = evaluate(bundle, world, config.eval_episodes, eval_rng(config.seed, 0))
            last = EpochStats(epoch=0, eval_success_rate=res.success_rate,
                              inference_accuracy=res.inference_accuracy, mean_return=res.mean_return)
            mw.write(last)
        for epoch in range(1, config.epochs + 1):
            st = train_epoch(bundle, env, config, rng, epoch)
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                res = evaluate(bundle, world, config.eval_episodes, eval_rng(config.seed, epoch))
                st.eval_success_rate = res.success_rate
                st.inference_accuracy = res.inference_accuracy
            mw.write(st)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_bundle(out / f"{ckpt_prefix}_epoch_{epoch}", bundle, {**meta, "epoch": epoch})
            if progress:
                progress(st)
            last = st
    save_bundle(out / f"{ckpt_prefix}_final", bundle, {**meta, "epoch": config.epochs})
    return last


def world_to_dict(world: WorldConfig) -> dict:
    from dataclasses import asdict
    d = asdict(world)
    d["gap_intervals"] = {k: list(v) for k, v in world.gap_intervals.items()}
    return d


# -- multi-variant experiments --------------------------------------------------

@dataclass(frozen=True)
class Variant:
    policy_kind: NetKind = NetKind.LSTM_NET
    inference_kind: NetKind = NetKind.LSTM_NET
    mode: Mode = Mode.SEPARATED

    def __post_init__(self):
        object.__setattr__(self, "policy_kind", NetKind(self.policy_kind))
        object.__setattr__(self, "inference_kind", NetKind(self.inference_kind))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is not Mode.SEPARATED and self.policy_kind is not self.inference_kind:
            raise ConfigError(f"{self.mode.value} uses one network; policy and inference kinds must match",
                              "experiment.variants")

    @property
    def name(self) -> str:
        if self.mode is Mode.SEPARATED:
            return f"{self.mode.value}-{self.policy_kind.value}-{self.inference_kind.value}"
        return f"{self.mode.value}-{self.policy_kind.value}"

    def build(self, config: TrainConfig, seed: int) -> AgentBundle:
        sep = self.mode is Mode.SEPARATED
        return AgentBundle.build(self.mode, default_spec(self.policy_kind, sep),
                                 default_spec(self.inference_kind, sep), config, seed)


@dataclass
class ExperimentPlan:
    variants: list
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 500
    eval_every: int = 25
    eval_episodes: int = 50
    steps_per_epoch: int = 1000
    p_conservative: float | None = None
    gap_interval_length: float | None = None
    checkpoint_every: int = 0
    train: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentPlan":
        if not self.seeds:
            raise ConfigError("at least one seed is required", "experiment.seeds")
        if not self.variants:
            raise ConfigError("at least one variant is required", "experiment.variants")
        self.variants = [v if isinstance(v, Variant) else Variant(*v) for v in self.variants]
        return self

    def world(self, base: WorldConfig | None = None) -> WorldConfig:
        w = base or WorldConfig()
        if self.p_conservative is not None:
            w = replace(w, p_conservative=self.p_conservative)
        if self.gap_interval_length is not None:
            w = with_gap_interval_length(w, self.gap_interval_length)
        w.validate()
        return w

    def train_config(self, variant: Variant, seed: int) -> TrainConfig:
        kw = dict(self.train)
        if variant.mode is not Mode.COUPLED:
            kw.pop("coupled_aux_weight", None)
        return TrainConfig(mode=variant.mode, epochs=self.epochs, eval_every=self.eval_every,
                           eval_episodes=self.eval_episodes, steps_per_epoch=self.steps_per_epoch,
                           checkpoint_every=self.checkpoint_every, seed=seed, **kw).validate()


def _run_cell(args):
    plan, variant, seed, world, out = args
    tag = f"{variant.name}_seed{seed}"
    done = _finished(out / "runs" / tag)
    if done is not None:
        return {"variant": variant.name, "seed": seed, "error": "", **done}
    try:
        cfg = plan.train_config(variant, seed)
        bundle = variant.build(cfg, seed)
        st = train_run(bundle, world, cfg, out / "runs" / tag, metrics_name="metrics.csv")
        return {"variant": variant.name, "seed": seed, "success_rate": st.eval_success_rate,
                "inference_accuracy": st.inference_accuracy, "error": ""}
    except Exception as exc:  # recorded, not fatal to the plan
        log.error("variant %s seed %s failed: %s", variant.name, seed, exc)
        return {"variant": variant.name, "seed": seed, "success_rate": float("nan"),
                "inference_accuracy": float("nan"), "error": f"{type(exc).__name__}: {exc}",
                "trace": traceback.format_exc()}


def _finished(run_dir: Path):
    """Final metrics of a completed run directory (one holding ``ckpt_final``), else None."""
    if not (run_dir / "ckpt_final.npz").exists() or not (run_dir / "metrics.csv").exists():
        return None
    rows = read_rows(run_dir / "metrics.csv")
    if not rows:
        return None
    last = rows[-1]
    return {k: float(last[k]) if last[k] != "" else float("nan")
            for k in ("inference_accuracy",)} | {
        "success_rate": float(last["eval_success_rate"]) if last["eval_success_rate"] else float("nan")}


def run_experiment(plan: ExperimentPlan, out_dir, base_world: WorldConfig | None = None,
                   workers: int = 1) -> list:
    """Train every (variant, seed) cell; returns the per-cell final rows.

    Writes ``runs/<variant>_seed<k>/metrics.csv`` (+ checkpoints), ``curves/`` copies
    named per cell, ``finals.csv`` and ``summary.csv``.
    """
    plan.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = plan.world(base_world)
    jobs = [(plan, v, s, world, out) for v in plan.variants for s in plan.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for r in rows:
        src = out / "runs" / f"{r['variant']}_seed{r['seed']}" / "metrics.csv"
        if src.exists():
            (curves / f"{r['variant']}_seed{r['seed']}.csv").write_text(src.read_text())
    write_finals(out, rows)
    return rows


def write_finals(out: Path, rows: list):
    with open(out / "finals.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "success_rate", "inference_accuracy", "error"])
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in w.fieldnames})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n_seeds", "success_mean", "success_min", "success_max",
                    "accuracy_mean", "accuracy_min", "accuracy_max", "failures"])
        for name in dict.fromkeys(r["variant"] for r in rows):
            ok = [r for r in rows if r["variant"] == name and not r.get("error")]
            failed = sum(1 for r in rows if r["variant"] == name and r.get("error"))
            cols = []
            for key in ("success_rate", "inference_accuracy"):
                vals = np.array([r[key] for r in ok], dtype=float)
                vals = vals[~np.isnan(vals)]
                cols += [_fmt(float(f(vals))) if len(vals) else "" for f in (np.mean, np.min, np.max)]
            w.writerow([name, len(ok), *cols, failed])


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- inference-only study -------------------------------------------------------

@dataclass
class InferenceStudy:
    """Supervised latent inference on rollouts of the scripted creep-then-go ego."""
    kinds: list = field(default_factory=lambda: [NetKind.LSTM_NET, NetKind.STGSAGE,
                                                 NetKind.STGAT, NetKind.STGCN])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 500
    steps_per_epoch: int = 1000
    passes: int = 10
    minibatch_episodes: int = 8
    lr: float = 1e-3
    eval_every: int = 25
    eval_episodes: int = 50
    separated_sizes: bool = False


def _study_cell(args):
    study, kind, seed, world, out = args
    kind = NetKind(kind)
    tag = f"{kind.value}_seed{seed}"
    done = _finished(out / "runs" / tag)
    if done is not None:
        return {"variant": kind.value, "seed": seed, "error": "", **done}
    spec = default_spec(kind, study.separated_sizes).with_(heads=frozenset({Head.LATENT}))
    net = build_network(spec, seed)
    opt = Adam(net.parameter_set("inference"), study.lr)
    env = TIntersectionEnv(world, seed=seed)
    rng = np.random.default_rng([seed, 0x1F])
    behavior = CreepThenGo(world)
    held_env = TIntersectionEnv(world, seed=10_000 + seed)
    held = collect_rollouts(None, held_env, 1, np.random.default_rng([seed, 0x40]), behavior=behavior,
                            max_episodes=study.eval_episodes)
    while len(held.episodes) < study.eval_episodes:
        held.episodes += collect_rollouts(None, held_env, 1, rng, behavior=behavior,
                                          max_episodes=study.eval_episodes - len(held.episodes)).episodes
    run_dir = out / "runs" / tag
    acc = float("nan")
    with MetricsWriter(run_dir / "metrics.csv") as mw:
        for epoch in range(1, study.epochs + 1):
            t0 = time.time()
            batch = collect_rollouts(None, env, study.steps_per_epoch, rng, behavior=behavior)
            loss, train_acc = inference_update(net, opt, batch, study.passes, study.minibatch_episodes, rng)
            st = EpochStats(epoch=epoch, env_steps=batch.n_steps,
                            mean_return=float(np.mean([e.ret for e in batch.episodes])),
                            train_success_rate=float(np.mean([e.goal for e in batch.episodes])),
                            inference_loss=loss, inference_accuracy=train_acc)
            if epoch % study.eval_every == 0 or epoch == study.epochs:
                acc = inference_accuracy_on(net, held)
                st.inference_accuracy = acc
                st.eval_success_rate = float(np.mean([e.goal for e in held.episodes]))
            st.wall_time_s = time.time() - t0
            mw.write(st)
    if study.epochs == 0:
        acc = inference_accuracy_on(net, held)
    save_inference_net(run_dir / "ckpt_final", net, {"seed": seed, "epochs": study.epochs})
    return {"variant": kind.value, "seed": seed, "success_rate": float("nan"),
            "inference_accuracy": acc, "error": ""}


def _safe_study_cell(job):
    try:
        return _study_cell(job)
    except Exception as exc:  # recorded, not fatal to the study
        log.error("study cell %s seed %s failed: %s", job[1], job[2], exc)
        return {"variant": NetKind(job[1]).value, "seed": job[2], "success_rate": float("nan"),
                "inference_accuracy": float("nan"), "error": f"{type(exc).__name__}: {exc}"}


def run_inference_study(study: InferenceStudy, out_dir, world: WorldConfig | None = None,
                        workers: int = 1) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = world or WorldConfig()
    jobs = [(study, k, s, world, out) for k in study.kinds for s in study.seeds]

    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_safe_study_cell, jobs))
    else:
        rows = [_safe_study_cell(j) for j in jobs]
    write_finals(out, rows)
    return rows


# -- sweeps ----------------------------------------------------------------------

class SweepAxis(str, enum.Enum):
    LATENT_DISTRIBUTION = "LATENT_DISTRIBUTION"
    GAP_INTERVAL_LENGTH = "GAP_INTERVAL_LENGTH"


@dataclass
class SweepSpec:
    axis: SweepAxis
    values: list
    checkpoints: list
    episodes: int = 50
    seed: int = 0

    def validate(self) -> "SweepSpec":
        try:
            self.axis = SweepAxis(self.axis)
        except ValueError:
            raise ConfigError(f"unknown sweep axis {self.axis!r}", "sweep.axis") from None
        if not self.values:
            raise ConfigError("no sweep values", "sweep.values")
        if not self.checkpoints:
            raise ConfigError("no checkpoints", "sweep.checkpoints")
        for v in self.values:
            if self.axis is SweepAxis.LATENT_DISTRIBUTION and not 0 <= v <= 1:
                raise ConfigError(f"p_conservative {v} outside [0, 1]", "sweep.values")
            if self.axis is SweepAxis.GAP_INTERVAL_LENGTH and not v >= 0:
                raise ConfigError(f"interval length {v} must be non-negative", "sweep.values")
        if self.episodes < 1:
            raise ConfigError("must be >= 1", "sweep.episodes")
        return self


def sweep_world(base: WorldConfig, axis: SweepAxis, value: float) -> WorldConfig:
    if SweepAxis(axis) is SweepAxis.LATENT_DISTRIBUTION:
        return replace(base, p_conservative=float(value))
    return with_gap_interval_length(base, float(value))


def run_sweep(spec: SweepSpec, out_path, base_world: WorldConfig | None = None,
              bundles: dict | None = None) -> list:
    """Evaluate each checkpoint at every axis value; rows as in the sweep CSV.

    ``relative_success`` divides by the mean over checkpoints at that axis value
    and is left empty for a single checkpoint.
    """
    spec.validate()
    base = base_world or WorldConfig()
    if bundles is None:
        bundles = {}
        for path in spec.checkpoints:
            name = Path(str(path)).parent.name or Path(str(path)).stem
            if name in bundles:
                name = f"{name}:{Path(str(path)).stem}"
            bundles[name] = load_bundle(path)
    rows = []
    for value in spec.values:
        world = sweep_world(base, spec.axis, value)
        cell = []
        for name, bundle in bundles.items():
            res = evaluate(bundle, world, spec.episodes, np.random.default_rng(spec.seed))
            cell.append({"axis_value": value, "variant": name, "seed": spec.seed,
                         "success_rate": res.success_rate, "inference_accuracy": res.inference_accuracy,
                         "relative_success": float("nan")})
        if len(cell) > 1:
            mean = np.mean([c["success_rate"] for c in cell])
            for c in cell:
                c["relative_success"] = c["success_rate"] / mean if mean > 0 else float("nan")
        rows += cell
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in SWEEP_FIELDS})
    return rows


# -- interpretability ---------------------------------------------------------------

def dump_interpretability(checkpoint, env_config: WorldConfig, n_episodes: int, out_path,
                          seed: int = 0, predictor=None) -> int:
    """Greedy episodes logged step by step as JSON lines; returns the record count.

    Works with a full agent checkpoint or an inference-only one (the scripted
    creep-then-go ego then drives).  ``predictor(info) -> probs`` replaces the
    inference network's output.
    """
    header, _ = read_checkpoint(checkpoint)
    if header["meta"].get("mode") == INFERENCE_ONLY:
        bundle, inf_net = None, load_inference_net(checkpoint)
        behavior = CreepThenGo(env_config)
    else:
        bundle = load_bundle(checkpoint)
        inf_net, behavior = bundle.inference, None
    graph_net = inf_net.spec.kind.is_graph
    env = TIntersectionEnv(env_config, seed=seed)
    rng = np.random.default_rng([seed, 0xD0])
    records = []
    with torch.no_grad():
        for ep in range(n_episodes):
            obs, info = env.reset()
            if behavior is not None:
                behavior.reset(rng)
            p_state = bundle.policy.initial_state(1) if bundle is not None else None
            i_state = None if (bundle is not None and bundle.shared) else inf_net.initial_state(1)
            t = 0
            while True:
                inp = obs_input(obs)
                if i_state is not None:
                    o, i_state = inf_net.step(inp, i_state)
                    probs = torch.sigmoid(o["latent_logits"][0]).numpy()
                if bundle is not None:
                    p_inp = inp._replace(latent=torch.from_numpy(probs)[None]) if bundle.policy_uses_latent else inp
                    o, p_state = bundle.policy.step(p_inp, p_state)
                    act_probs = torch.softmax(o["logits"][0], -1).numpy()
                    if bundle.shared:
                        probs = torch.sigmoid(o["latent_logits"][0]).numpy()
                    action = int(np.argmax(act_probs))
                else:
                    action = int(behavior(obs))
                    act_probs = np.eye(3)[action]
                if predictor is not None:
                    probs = np.asarray(predictor(info), dtype=float)
                present = obs.slots[1:, 4] > 0
                inferred = [float(p) if m else None for p, m in zip(probs, present)]
                res = env.step(action)
                rec = episode_record(t, obs, action, res.reward, res.done, info["true_latents"],
                                     episode=ep, inferred=inferred,
                                     inferred_mode=[None if p is None else int(p >= 0.5) for p in inferred],
                                     action_probs=[float(x) for x in act_probs])
                if not graph_net:
                    rec["graph_edges"] = []
                records.append(rec)
                obs, info = res.observation, res.info
                t += 1
                if res.done:
                    break
    write_jsonl(out_path, records)
    return len(records)
