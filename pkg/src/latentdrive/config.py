"""Run configuration: TOML file + environment overrides + ``--set`` overrides.

Precedence, lowest first: built-in defaults, the config file, environment
variables, ``--set`` arguments.  An environment variable ``LATENTDRIVE_A__B=v``
is the same as ``--set a.b=v`` (double underscore = dot, name lower-cased).
Values are parsed as TOML literals, falling back to a bare string.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import ConfigError
from .harness import ExperimentPlan, SweepAxis, Variant
from .nn.networks import NetKind, NetworkSpec
from .sim import WorldConfig
from .trainer import Mode, TrainConfig

ENV_PREFIX = "LATENTDRIVE_"
RESOLVED_NAME = "resolved_config.toml"


@dataclass
class NetConfig:
    """Network sizes; zero means the per-kind default for the run's mode."""
    kind: NetKind = NetKind.LSTM_NET
    hidden_units: int = 0
    node_dim: int = 0
    conv_layers: int = 3
    gat_heads: int = 2


@dataclass
class EvalConfig:
    episodes: int = 50
    checkpoint: str = ""


@dataclass
class SweepConfig:
    axis: SweepAxis = SweepAxis.LATENT_DISTRIBUTION
    values: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    checkpoints: list = field(default_factory=list)
    episodes: int = 50


@dataclass
class DumpConfig:
    episodes: int = 3
    checkpoint: str = ""


@dataclass
class ExperimentConfig:
    variants: list = field(default_factory=lambda: [["LSTM_NET", "LSTM_NET", "SEPARATED"]])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 500
    eval_every: int = 25
    eval_episodes: int = 50
    steps_per_epoch: int = 1000
    p_conservative: float | None = None
    gap_interval_length: float | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    policy: NetConfig = field(default_factory=NetConfig)
    inference: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    dump: DumpConfig = field(default_factory=DumpConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.train.seed = self.seed
        self.train.validate()
        for name in ("policy", "inference"):
            net = getattr(self, name)
            try:
                net.kind = NetKind(net.kind)
            except ValueError:
                raise ConfigError(f"unknown network kind {net.kind!r}; expected one of "
                                  f"{[k.value for k in NetKind]}", f"{name}.kind") from None
        if self.train.mode is not Mode.SEPARATED and self.policy.kind is not self.inference.kind:
            raise ConfigError("SHARED/COUPLED use one network: inference.kind must equal policy.kind",
                              "inference.kind")
        try:
            self.sweep.axis = SweepAxis(self.sweep.axis)
        except ValueError:
            raise ConfigError(f"unknown sweep axis {self.sweep.axis!r}", "sweep.axis") from None
        try:
            self.experiment_plan().validate()
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), "experiment.variants") from None
        return self

    def network_spec(self, which: str) -> NetworkSpec:
        from .nn.networks import default_spec
        net = getattr(self, which)
        sep = Mode(self.train.mode) is Mode.SEPARATED
        kw = {"conv_layers": net.conv_layers, "gat_heads": net.gat_heads}
        if net.hidden_units:
            kw["hidden_units"] = net.hidden_units
        if net.node_dim:
            kw["node_dim"] = net.node_dim
        return default_spec(net.kind, sep, **kw)

    def experiment_plan(self) -> ExperimentPlan:
        e = self.experiment
        train_kw = {f.name: getattr(self.train, f.name) for f in dataclasses.fields(TrainConfig)
                    if f.name not in ("mode", "epochs", "eval_every", "eval_episodes",
                                      "steps_per_epoch", "seed", "checkpoint_every")}
        return ExperimentPlan(variants=[Variant(*v) for v in e.variants], seeds=list(e.seeds),
                              epochs=e.epochs, eval_every=e.eval_every, eval_episodes=e.eval_episodes,
                              steps_per_epoch=e.steps_per_epoch, p_conservative=e.p_conservative,
                              gap_interval_length=e.gap_interval_length,
                              checkpoint_every=self.train.checkpoint_every, train=train_kw)


# -- (de)serialisation --------------------------------------------------------

def _from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a table, got {type(data).__name__}", prefix.rstrip(".") or "<root>")
    flds = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(flds))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(flds)}", f"{prefix}{unknown[0]}")
    defaults = cls()
    kw = {}
    for name, value in data.items():
        cur = getattr(defaults, name)
        key = f"{prefix}{name}"
        if dataclasses.is_dataclass(cur):
            kw[name] = _from_dict(type(cur), value, key + ".")
        elif isinstance(cur, tuple):
            kw[name] = tuple(value)
        elif name == "gap_intervals":
            if not isinstance(value, dict):
                raise ConfigError("expected a table of [lo, hi] pairs", key)
            kw[name] = {k: tuple(v) for k, v in value.items()}
        elif isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"expected true/false, got {value!r}", key)
            kw[name] = value
        elif isinstance(cur, float) and isinstance(value, int) and not isinstance(value, bool):
            kw[name] = float(value)
        elif isinstance(cur, int) and not isinstance(cur, enum.Enum):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"expected an integer, got {value!r}", key)
            kw[name] = value
        elif isinstance(cur, float) and not isinstance(value, float):
            raise ConfigError(f"expected a number, got {value!r}", key)
        else:
            kw[name] = value
    try:
        return dataclasses.replace(defaults, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), prefix.rstrip(".") or "<root>") from None


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if v is None:
            continue
        if dataclasses.is_dataclass(v):
            out[f.name] = _to_dict(v)
        elif isinstance(v, enum.Enum):
            out[f.name] = v.value
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        elif isinstance(v, dict):
            out[f.name] = {k: list(x) if isinstance(x, tuple) else x for k, x in v.items()}
        else:
            out[f.name] = v
    return out


def parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_path(data: dict, key: str, value):
    parts = key.split(".")
    d = data
    for p in parts[:-1]:
        nxt = d.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{p} is not a table", key)
        d = nxt
    d[parts[-1]] = value


def env_overrides(environ=None) -> list:
    environ = os.environ if environ is None else environ
    out = []
    for name, value in sorted(environ.items()):
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            out.append(f"{name[len(ENV_PREFIX):].lower().replace('__', '.')}={value}")
    return out


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    """Resolve a RunConfig; raises ConfigError naming the offending key."""
    data = {}
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", "--config") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}", "--config") from None
    for item in [*env_overrides(environ), *overrides]:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", item)
        key, text = item.split("=", 1)
        _set_path(data, key.strip(), parse_value(text.strip()))
    return _from_dict(RunConfig, data).validate()


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(_to_dict(cfg))


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / RESOLVED_NAME
    p.write_text(dump_config(cfg))
    return p
