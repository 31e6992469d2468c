"""Recurrent policy / inference networks: a flat LSTM and the spatio-temporal
graph family (STGSage, STGAT, STGCN).

All networks consume one :class:`StepInput` per timestep and carry an explicit
recurrent state.  Absent vehicle slots have their recurrent state zeroed, so a
vehicle entering a freed slot starts from a clean history.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import torch
from torch import nn

from ..errors import ContractViolation
from .autodiff import DTYPE, ParameterSet
from .layers import CONV_TYPES, GATConv, Linear, LSTMCell

POS_SCALE = 10.0
VEL_SCALE = 3.0
PROGRESS_SCALE = 20.0
N_ACTIONS = 3


class NetKind(str, enum.Enum):
    LSTM_NET = "LSTM_NET"
    STGSAGE = "STGSAGE"
    STGAT = "STGAT"
    STGCN = "STGCN"

    @property
    def is_graph(self) -> bool:
        return self is not NetKind.LSTM_NET


class Head(str, enum.Enum):
    ACTION = "ACTION"
    VALUE = "VALUE"
    LATENT = "LATENT"


_CONV_OF = {NetKind.STGSAGE: "sage", NetKind.STGAT: "gat", NetKind.STGCN: "gcn"}


@dataclass(frozen=True)
class NetworkSpec:
    kind: NetKind = NetKind.LSTM_NET
    hidden_units: int = 48
    node_dim: int = 24
    conv_layers: int = 3
    heads: frozenset = field(default_factory=lambda: frozenset({Head.ACTION, Head.VALUE}))
    latent_input: bool = False
    n_surrounding: int = 8
    gat_heads: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", NetKind(self.kind))
        object.__setattr__(self, "heads", frozenset(Head(h) for h in self.heads))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "hidden_units": self.hidden_units, "node_dim": self.node_dim,
            "conv_layers": self.conv_layers, "heads": sorted(h.value for h in self.heads),
            "latent_input": self.latent_input, "n_surrounding": self.n_surrounding,
            "gat_heads": self.gat_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["heads"] = frozenset(d.get("heads", ("ACTION", "VALUE")))
        return cls(**d)

    def with_(self, **kw) -> "NetworkSpec":
        return replace(self, **kw)


def default_spec(kind: NetKind | str, separated: bool = False, **kw) -> NetworkSpec:
    """Default sizes: LSTM 48 hidden (28 when separated); graph nets 24/24 (18/18)."""
    kind = NetKind(kind)
    if kind is NetKind.LSTM_NET:
        size = dict(hidden_units=28 if separated else 48)
    else:
        n = 18 if separated else 24
        size = dict(hidden_units=n, node_dim=n)
    size.update(kw)
    return NetworkSpec(kind=kind, **size)


class StepInput(NamedTuple):
    slots: torch.Tensor      # (B, S, 5): x, y, vx, vy, present; slot 0 = ego
    progress: torch.Tensor   # (B,)
    adj: torch.Tensor        # (B, S, S), adj[dst, src]
    latent: torch.Tensor | None = None  # (B, S-1) conservative probability per surrounding slot


def _scaled(slots):
    scale = torch.tensor([POS_SCALE, POS_SCALE, VEL_SCALE, VEL_SCALE, 1.0], dtype=DTYPE)
    return slots / scale


class RecurrentNet(nn.Module):
    """Shared interface; subclasses implement ``step`` and ``initial_state``."""

    spec: NetworkSpec

    def parameter_set(self, prefix: str = "") -> ParameterSet:
        return ParameterSet.from_module(self, prefix)

    def encoder_parameters(self, prefix: str = "") -> ParameterSet:
        ps = self.parameter_set(prefix)
        head = f"{prefix}/head_" if prefix else "head_"
        return ps.without(head)

    def head_parameters(self, which: Head, prefix: str = "") -> ParameterSet:
        head = f"{prefix}/head_{which.value.lower()}" if prefix else f"head_{which.value.lower()}"
        return self.parameter_set(prefix).subset(head)

    def _make_heads(self, n_embed: int, gen):
        if Head.ACTION in self.spec.heads:
            self.head_action = Linear(n_embed, N_ACTIONS, gen)
        if Head.VALUE in self.spec.heads:
            self.head_value = Linear(n_embed, 1, gen)

    def _check_input(self, inp: StepInput):
        s = self.spec.n_surrounding + 1
        if inp.slots.shape[-2:] != (s, 5):
            raise ContractViolation(f"expected slots of shape (B, {s}, 5), got {tuple(inp.slots.shape)}")
        if self.spec.latent_input and inp.latent is None:
            raise ContractViolation("network expects a latent input channel")

    def unroll(self, inputs: list, state=None):
        """Run a sequence of StepInputs; returns stacked outputs (T leading) and final state."""
        outs = []
        if state is None:
            state = self.initial_state(inputs[0].slots.shape[0])
        for inp in inputs:
            o, state = self.step(inp, state)
            outs.append(o)
        return {k: torch.stack([o[k] for o in outs]) for k in outs[0]}, state


class LstmNet(RecurrentNet):
    """One LSTM over the concatenated slot vector (+ ego progress, + latent channel)."""

    def __init__(self, spec: NetworkSpec, gen: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        s = spec.n_surrounding + 1
        self.n_in = 5 * s + 1 + (spec.n_surrounding if spec.latent_input else 0)
        h = spec.hidden_units
        self.lstm = LSTMCell(self.n_in, h, gen)
        self._make_heads(h, gen)
        if Head.LATENT in spec.heads:
            self.head_latent = Linear(h, spec.n_surrounding, gen)

    def initial_state(self, batch: int):
        z = torch.zeros(batch, self.spec.hidden_units, dtype=DTYPE)
        return (z, z.clone())

    def step(self, inp: StepInput, state):
        self._check_input(inp)
        b = inp.slots.shape[0]
        parts = [_scaled(inp.slots).reshape(b, -1), (inp.progress / PROGRESS_SCALE).reshape(b, 1)]
        if self.spec.latent_input:
            parts.append(inp.latent * inp.slots[:, 1:, 4])
        out, state = self.lstm(torch.cat(parts, dim=-1), state)
        return self._heads(out), state

    def _heads(self, emb):
        res = {}
        if Head.ACTION in self.spec.heads:
            res["logits"] = self.head_action(emb)
        if Head.VALUE in self.spec.heads:
            res["value"] = self.head_value(emb).squeeze(-1)
        if Head.LATENT in self.spec.heads:
            res["latent_logits"] = self.head_latent(emb)
        return res


class STGNet(RecurrentNet):
    """Bottom per-vehicle LSTMs -> graph convolutions -> top per-vehicle LSTMs.

    The ego has its own LSTM parameters at both levels; all surrounding
    vehicles share one set per level.
    """

    def __init__(self, spec: NetworkSpec, gen: torch.Generator | None = None):
        super().__init__()
        if not spec.kind.is_graph:
            raise ContractViolation(f"STGNet needs a graph kind, got {spec.kind}")
        self.spec = spec
        h, d = spec.hidden_units, spec.node_dim
        n_sur_in = 5 + (1 if spec.latent_input else 0)
        self.bottom_ego = LSTMCell(5, h, gen)
        self.bottom_sur = LSTMCell(n_sur_in, h, gen)
        conv_cls = CONV_TYPES[_CONV_OF[spec.kind]]
        convs = []
        n_in = h
        for _ in range(spec.conv_layers):
            if conv_cls is GATConv:
                convs.append(GATConv(n_in, d, heads=spec.gat_heads, gen=gen))
            else:
                convs.append(conv_cls(n_in, d, gen))
            n_in = d
        self.convs = nn.ModuleList(convs)
        self.top_ego = LSTMCell(n_in, h, gen)
        self.top_sur = LSTMCell(n_in, h, gen)
        self._make_heads(h, gen)
        if Head.LATENT in spec.heads:
            self.head_latent = Linear(h, 1, gen)

    def initial_state(self, batch: int):
        s, h = self.spec.n_surrounding, self.spec.hidden_units
        ze = torch.zeros(batch, h, dtype=DTYPE)
        zs = torch.zeros(batch, s, h, dtype=DTYPE)
        return ((ze, ze.clone()), (zs, zs.clone()), (ze.clone(), ze.clone()), (zs.clone(), zs.clone()))

    def step(self, inp: StepInput, state):
        out, _, state = self.embed(inp, state)
        return out, state

    def embed(self, inp: StepInput, state):
        """Returns (head outputs, top-level node embeddings (B, S, H), new state)."""
        self._check_input(inp)
        b = inp.slots.shape[0]
        (be, bs, te, ts) = state
        x = _scaled(inp.slots)
        mask = inp.slots[..., 4]
        sur_mask = mask[:, 1:].unsqueeze(-1)
        ego_x = torch.cat([x[:, 0, :4], (inp.progress / PROGRESS_SCALE).reshape(b, 1)], dim=-1)
        sur_x = x[:, 1:]
        if self.spec.latent_input:
            sur_x = torch.cat([sur_x, (inp.latent * mask[:, 1:]).unsqueeze(-1)], dim=-1)

        he, be = self.bottom_ego(ego_x, be)
        hs, bs = self._shared(self.bottom_sur, sur_x, bs, sur_mask)
        nodes = torch.cat([he.unsqueeze(1), hs], dim=1)
        for conv in self.convs:
            nodes = conv(nodes, inp.adj, mask)
        te_out, te = self.top_ego(nodes[:, 0], te)
        ts_out, ts = self._shared(self.top_sur, nodes[:, 1:], ts, sur_mask)

        res = {}
        if Head.ACTION in self.spec.heads:
            res["logits"] = self.head_action(te_out)
        if Head.VALUE in self.spec.heads:
            res["value"] = self.head_value(te_out).squeeze(-1)
        if Head.LATENT in self.spec.heads:
            res["latent_logits"] = self.head_latent(ts_out).squeeze(-1)
        emb = torch.cat([te_out.unsqueeze(1), ts_out], dim=1)
        return res, emb, (be, bs, te, ts)

    @staticmethod
    def _shared(cell, x, state, mask):
        b, s = x.shape[:2]
        h, c = state
        out, (h2, c2) = cell(x.reshape(b * s, -1), (h.reshape(b * s, -1), c.reshape(b * s, -1)))
        h2 = h2.reshape(b, s, -1) * mask
        c2 = c2.reshape(b, s, -1) * mask
        return h2, (h2, c2)


def build_network(spec: NetworkSpec, seed: int = 0) -> RecurrentNet:
    gen = torch.Generator().manual_seed(int(seed))
    if spec.kind is NetKind.LSTM_NET:
        return LstmNet(spec, gen)
    return STGNet(spec, gen)


def action_distribution(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def latent_probability(latent_logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(latent_logits)
