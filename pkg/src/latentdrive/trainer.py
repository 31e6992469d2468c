"""Rollouts, GAE, PPO and the supervised latent-inference task.

Three ways of wiring the inference task to the policy learner are supported:

* ``SEPARATED``: disjoint policy and inference networks with their own
  optimizers.  The policy sees a per-vehicle latent channel: ground truth while
  training, the inference network's probabilities at test time.
* ``SHARED``: one encoder with action/value/latent heads; the PPO loss and the
  inference loss each step their own optimizer, both touching the encoder.
* ``COUPLED``: one encoder, one optimizer on ``L_ppo + w * L_inf``.

In every mode the value head is a baseline fitted on detached policy features
by its own optimizer.
"""

from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .env import Action, Observation, TIntersectionEnv
from .errors import ConfigError, ContractViolation
from .nn.autodiff import DTYPE, Adam, ParameterSet
from .nn.networks import Head, NetworkSpec, RecurrentNet, StepInput, build_network, default_spec
from .sim import WorldConfig

LOG_EPS = np.finfo(np.float64).eps


class Mode(str, enum.Enum):
    SEPARATED = "SEPARATED"
    SHARED = "SHARED"
    COUPLED = "COUPLED"


class LatentSource(str, enum.Enum):
    GROUND_TRUTH = "GROUND_TRUTH"
    INFERRED = "INFERRED"


@dataclass
class TrainConfig:
    mode: Mode = Mode.SEPARATED
    policy_lr: float = 1e-4
    aux_lr: float = 1e-3
    coupled_aux_weight: float | None = None
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    steps_per_epoch: int = 1000
    epochs: int = 500
    ppo_update_passes: int = 10
    minibatch_episodes: int = 8
    entropy_coef: float = 0.0
    seed: int = 0
    eval_every: int = 25
    eval_episodes: int = 50
    checkpoint_every: int = 100

    def validate(self) -> "TrainConfig":
        try:
            self.mode = Mode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of "
                              f"{[m.value for m in Mode]}", "train.mode") from None
        if self.coupled_aux_weight is not None and self.mode is not Mode.COUPLED:
            raise ConfigError("only meaningful in COUPLED mode", "train.coupled_aux_weight")
        for key in ("policy_lr", "aux_lr", "clip_epsilon"):
            if not getattr(self, key) > 0:
                raise ConfigError("must be positive", f"train.{key}")
        for key in ("gamma", "gae_lambda"):
            if not 0 <= getattr(self, key) <= 1:
                raise ConfigError("must lie in [0, 1]", f"train.{key}")
        for key in ("steps_per_epoch", "ppo_update_passes", "minibatch_episodes", "eval_episodes"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", f"train.{key}")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "train.epochs")
        return self

    @property
    def aux_weight(self) -> float:
        return 0.1 if self.coupled_aux_weight is None else self.coupled_aux_weight

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = Mode(self.mode).value
        return d


# -- rollout storage ------------------------------------------------------

@dataclass
class Episode:
    slots: list = field(default_factory=list)
    progress: list = field(default_factory=list)
    adj: list = field(default_factory=list)
    latent_in: list = field(default_factory=list)
    true_latents: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    latent_pred: list = field(default_factory=list)
    goal: bool = False
    collision: bool = False

    def __len__(self):
        return len(self.actions)

    def finalize(self):
        for name in ("slots", "progress", "adj", "latent_in", "true_latents", "actions", "logp",
                     "values", "rewards", "dones", "latent_pred"):
            setattr(self, name, np.asarray(getattr(self, name)))
        return self

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))


@dataclass
class RolloutBatch:
    episodes: list
    gamma: float = 0.99
    gae_lambda: float = 0.95
    _adv: list | None = None
    _ret: list | None = None

    @property
    def n_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def _compute(self):
        self._adv, self._ret = [], []
        for ep in self.episodes:
            a, r = compute_gae(ep.rewards, ep.values, ep.dones, self.gamma, self.gae_lambda)
            self._adv.append(a)
            self._ret.append(r)

    def advantages(self, normalize: bool = True) -> list:
        if self._adv is None:
            self._compute()
        if not normalize:
            return self._adv
        flat = np.concatenate(self._adv)
        mu, sd = flat.mean(), flat.std()
        return [(a - mu) / (sd + 1e-8) for a in self._adv]

    def returns(self) -> list:
        if self._ret is None:
            self._compute()
        return self._ret

    def padded(self, idx, adv=None, ret=None) -> dict:
        """Time-major tensors (T_max, B, ...) for the episodes in ``idx``."""
        eps = [self.episodes[i] for i in idx]
        t_max = max(len(e) for e in eps)
        b = len(eps)

        def stack(name, tail, dtype=np.float64, fill=0):
            out = np.full((t_max, b) + tail, fill, dtype=dtype)
            for j, e in enumerate(eps):
                out[:len(e), j] = getattr(e, name)
            return out

        ep0 = eps[0]
        s = ep0.slots.shape[1]
        out = {
            "slots": torch.from_numpy(stack("slots", (s, 5))),
            "progress": torch.from_numpy(stack("progress", ())),
            "adj": torch.from_numpy(stack("adj", (s, s))),
            "latent_in": torch.from_numpy(stack("latent_in", (s - 1,))),
            "true_latents": torch.from_numpy(stack("true_latents", (s - 1,), np.int64, -1)),
            "actions": torch.from_numpy(stack("actions", (), np.int64)),
            "logp": torch.from_numpy(stack("logp", ())),
            "mask": torch.from_numpy(np.array([[1.0 if t < len(e) else 0.0 for e in eps]
                                               for t in range(t_max)])),
        }
        for name, series in (("adv", adv), ("ret", ret)):
            if series is not None:
                arr = np.zeros((t_max, b))
                for j, i in enumerate(idx):
                    arr[:len(series[i]), j] = series[i]
                out[name] = torch.from_numpy(arr)
        return out


def step_inputs(padded: dict, latent_key: str = "latent_in") -> list:
    t_max = padded["slots"].shape[0]
    lat = padded.get(latent_key)
    return [StepInput(padded["slots"][t], padded["progress"][t], padded["adj"][t],
                      None if lat is None else lat[t]) for t in range(t_max)]


def obs_input(obs: Observation, latent=None) -> StepInput:
    s = obs.slots.shape[0]
    lat = None if latent is None else torch.from_numpy(np.asarray(latent, dtype=np.float64))[None]
    return StepInput(torch.from_numpy(obs.slots)[None], torch.tensor([obs.ego_progress], dtype=DTYPE),
                     torch.from_numpy(obs.graph.adjacency(s))[None], lat)


def ground_truth_channel(true_latents: np.ndarray) -> np.ndarray:
    return np.where(true_latents >= 0, true_latents, 0).astype(np.float64)


# -- agent bundle ----------------------------------------------------------

class AgentBundle:
    """Policy + inference networks and their optimizers, wired per ``mode``."""

    def __init__(self, mode: Mode, policy: RecurrentNet, inference: RecurrentNet, config: TrainConfig):
        self.mode = Mode(mode)
        self.policy = policy
        self.inference = inference
        self.config = config
        self.optimizers = self._make_optimizers()

    @classmethod
    def build(cls, mode, policy_spec: NetworkSpec | None = None, inference_spec: NetworkSpec | None = None,
              config: TrainConfig | None = None, seed: int = 0):
        mode = Mode(mode)
        config = config or TrainConfig(mode=mode)
        sep = mode is Mode.SEPARATED
        policy_spec = policy_spec or default_spec("LSTM_NET", separated=sep)
        if sep:
            inference_spec = inference_spec or default_spec("LSTM_NET", separated=True)
            pol = build_network(policy_spec.with_(heads={Head.ACTION, Head.VALUE}, latent_input=True), seed)
            inf = build_network(inference_spec.with_(heads={Head.LATENT}, latent_input=False), seed + 7919)
            return cls(mode, pol, inf, config)
        net = build_network(policy_spec.with_(heads={Head.ACTION, Head.VALUE, Head.LATENT},
                                              latent_input=False), seed)
        return cls(mode, net, net, config)

    @property
    def shared(self) -> bool:
        return self.mode is not Mode.SEPARATED

    @property
    def policy_uses_latent(self) -> bool:
        return self.policy.spec.latent_input

    def specs(self) -> dict:
        if self.shared:
            return {"shared": self.policy.spec}
        return {"policy": self.policy.spec, "inference": self.inference.spec}

    def parameters(self) -> ParameterSet:
        if self.shared:
            return self.policy.parameter_set("shared")
        ps = self.policy.parameter_set("policy")
        ps.update(self.inference.parameter_set("inference"))
        return ps

    def policy_parameters(self) -> ParameterSet:
        if self.shared:
            return self.policy.parameter_set("shared").without("shared/head_latent")
        return self.policy.parameter_set("policy")

    def inference_parameters(self) -> ParameterSet:
        if self.shared:
            return self.policy.parameter_set("shared").without("shared/head_action").without("shared/head_value")
        return self.inference.parameter_set("inference")

    def parameter_count(self) -> int:
        return self.parameters().count()

    def _make_optimizers(self) -> dict:
        c = self.config
        pre = "shared" if self.shared else "policy"
        enc = self.policy.encoder_parameters(pre)
        value = self.policy.head_parameters(Head.VALUE, pre)
        action = self.policy.head_parameters(Head.ACTION, pre)
        opts = {"value": Adam(value, c.aux_lr)}
        if self.mode is Mode.SEPARATED:
            opts["policy"] = Adam(ParameterSet({**enc, **action}), c.policy_lr)
            opts["inference"] = Adam(self.inference.parameter_set("inference"), c.aux_lr)
        elif self.mode is Mode.SHARED:
            latent = self.policy.head_parameters(Head.LATENT, pre)
            opts["policy"] = Adam(ParameterSet({**enc, **action}), c.policy_lr)
            opts["inference"] = Adam(ParameterSet({**enc, **latent}), c.aux_lr)
        else:
            latent = self.policy.head_parameters(Head.LATENT, pre)
            opts["policy"] = Adam(ParameterSet({**enc, **action, **latent}), c.policy_lr)
        return opts


# -- losses ---------------------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalised advantage estimates and returns (= advantages + values).

    Episode ends (``dones``) bootstrap with zero; ``last_value`` bootstraps a
    trailing partial episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not len(rewards) == len(values) == len(dones):
        raise ContractViolation(f"length mismatch: rewards {len(rewards)}, values {len(values)}, "
                                f"dones {len(dones)}")
    adv = np.zeros_like(rewards)
    nxt_v, nxt_a = last_value, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_v * live - values[t]
        nxt_a = delta + gamma * lam * live * nxt_a
        adv[t] = nxt_a
        nxt_v = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, adv, eps: float):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)


def ppo_loss(new_logp, old_logp, adv, eps: float, mask=None):
    """Negative clipped surrogate, averaged over the (masked) samples."""
    surr = clipped_surrogate(torch.exp(new_logp - old_logp), adv, eps)
    if mask is None:
        return -surr.mean()
    return -(surr * mask).sum() / mask.sum().clamp(min=1.0)


def inference_loss(probs, labels, mask):
    """Mean binary cross-entropy over present (vehicle, step) pairs; 0 when none are present."""
    probs = torch.as_tensor(probs, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=DTYPE)
    mask = torch.as_tensor(mask, dtype=DTYPE)
    n = mask.sum()
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    ll = labels * torch.log(probs.clamp(min=LOG_EPS)) + (1 - labels) * torch.log((1 - probs).clamp(min=LOG_EPS))
    return -(ll * mask).sum() / n


def inference_loss_logits(logits, labels, mask):
    """Same objective as :func:`inference_loss`, computed stably from logits."""
    n = mask.sum()
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    bce = F.binary_cross_entropy_with_logits(logits, labels.to(DTYPE), reduction="none")
    return (bce * mask).sum() / n


def latent_mask_and_labels(true_latents, step_mask=None):
    mask = (true_latents >= 0).to(DTYPE)
    if step_mask is not None:
        mask = mask * step_mask.unsqueeze(-1)
    return mask, true_latents.clamp(min=0).to(DTYPE)


def accuracy_counts(probs: np.ndarray, true_latents: np.ndarray):
    """(correct, total) over present slots with a 0.5 threshold."""
    m = true_latents >= 0
    pred = (probs >= 0.5).astype(np.int64)
    return int((pred[m] == true_latents[m]).sum()), int(m.sum())


# -- rollouts -------------------------------------------------------------

class CreepThenGo:
    """Scripted ego: drive up, creep until the nose is past the entry line, hold
    for a random number of steps while traffic reacts, then go.

    Uses only the ego's own path progress.
    """

    def __init__(self, config: WorldConfig | None = None, wait_range=(10, 80)):
        g = (config or WorldConfig()).geometry
        self.approach = max(0.0, -g.ego_start_y - g.vehicle_length / 2 - 3.0)
        self.nose_in = -g.ego_start_y - g.vehicle_length / 2 + 0.2 + g.entry_line_y
        self.wait_range = wait_range
        self.reset(np.random.default_rng(0))

    def reset(self, rng: np.random.Generator):
        self.wait = int(rng.integers(self.wait_range[0], self.wait_range[1] + 1))
        self.held = 0

    def __call__(self, obs: Observation) -> int:
        p = obs.ego_progress
        if p < self.approach:
            return Action.GO
        if p < self.nose_in:
            return Action.CREEP
        if self.held < self.wait:
            self.held += 1
            return Action.STOP
        return Action.GO


def collect_rollouts(bundle: AgentBundle | None, env: TIntersectionEnv, n_steps: int,
                     rng: np.random.Generator, latent_source: LatentSource = LatentSource.GROUND_TRUTH,
                     greedy: bool = False, behavior=None, max_episodes: int | None = None) -> RolloutBatch:
    """Run whole episodes back to back until at least ``n_steps`` steps are stored.

    ``behavior`` (an object with ``reset(rng)`` and ``__call__(obs)``) replaces the
    policy network; log-probabilities and values are then recorded as zero.
    """
    if n_steps < 1:
        raise ContractViolation("n_steps must be >= 1")
    latent_source = LatentSource(latent_source)
    episodes = []
    total = 0
    n_sur = env.config.max_surrounding
    if bundle is not None and bundle.inference.spec.n_surrounding != n_sur:
        raise ContractViolation(f"inference network expects {bundle.inference.spec.n_surrounding} "
                                f"surrounding slots, environment provides {n_sur}")
    with torch.no_grad():
        while total < n_steps and (max_episodes is None or len(episodes) < max_episodes):
            obs, info = env.reset()
            ep = Episode()
            p_state = bundle.policy.initial_state(1) if bundle is not None else None
            need_inf = (bundle is not None and not bundle.shared
                        and latent_source is LatentSource.INFERRED)
            i_state = bundle.inference.initial_state(1) if need_inf else None
            if behavior is not None:
                behavior.reset(rng)
            while True:
                lat_true = info["true_latents"]
                inp = obs_input(obs)
                pred = None
                if need_inf:
                    o, i_state = bundle.inference.step(inp, i_state)
                    pred = torch.sigmoid(o["latent_logits"])[0].numpy()
                if bundle is not None and bundle.policy_uses_latent:
                    chan = ground_truth_channel(lat_true) if latent_source is LatentSource.GROUND_TRUTH else pred
                    inp = inp._replace(latent=torch.from_numpy(np.asarray(chan, dtype=np.float64))[None])
                else:
                    chan = np.zeros(n_sur)
                if behavior is not None:
                    action, logp, value = int(behavior(obs)), 0.0, 0.0
                else:
                    o, p_state = bundle.policy.step(inp, p_state)
                    probs = torch.softmax(o["logits"][0], -1).numpy()
                    action = int(np.argmax(probs)) if greedy else int(rng.choice(len(probs), p=probs))
                    logp = float(np.log(max(probs[action], LOG_EPS)))
                    value = float(o["value"][0])
                    if bundle.shared:
                        pred = torch.sigmoid(o["latent_logits"][0]).numpy()
                ep.slots.append(obs.slots)
                ep.progress.append(obs.ego_progress)
                ep.adj.append(inp.adj[0].numpy())
                ep.latent_in.append(np.asarray(chan, dtype=np.float64))
                ep.true_latents.append(lat_true)
                ep.latent_pred.append(pred if pred is not None else np.full(n_sur, np.nan))
                ep.actions.append(action)
                ep.logp.append(logp)
                ep.values.append(value)
                res = env.step(action)
                ep.rewards.append(res.reward)
                ep.dones.append(float(res.done))
                obs, info = res.observation, res.info
                if res.done:
                    ep.goal = info["events"].goal_reached
                    ep.collision = info["events"].collision
                    break
            episodes.append(ep.finalize())
            total += len(ep)
    batch = RolloutBatch(episodes)
    if bundle is not None:
        batch.gamma, batch.gae_lambda = bundle.config.gamma, bundle.config.gae_lambda
    return batch


# -- updates ----------------------------------------------------------------

def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _grads(loss, params: ParameterSet) -> dict:
    tensors = list(params.values())
    gs = torch.autograd.grad(loss, tensors, retain_graph=True, allow_unused=True)
    return {k: (torch.zeros_like(p) if g is None else g) for (k, p), g in zip(params.items(), gs)}


@dataclass
class EpochStats:
    epoch: int = 0
    env_steps: int = 0
    mean_return: float = 0.0
    train_success_rate: float = 0.0
    eval_success_rate: float = float("nan")
    inference_accuracy: float = float("nan")
    ppo_loss: float = 0.0
    value_loss: float = 0.0
    inference_loss: float = 0.0
    wall_time_s: float = 0.0

    FIELDS = ("epoch", "env_steps", "mean_return", "train_success_rate", "eval_success_rate",
              "inference_accuracy", "ppo_loss", "value_loss", "inference_loss", "wall_time_s")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _policy_terms(bundle: AgentBundle, out: dict, mb: dict, eps: float):
    mask = mb["mask"]
    logp_all = torch.log_softmax(out["logits"], -1)
    new_logp = logp_all.gather(-1, mb["actions"].unsqueeze(-1)).squeeze(-1)
    l_ppo = ppo_loss(new_logp, mb["logp"], mb["adv"], eps, mask)
    if bundle.config.entropy_coef:
        ent = -(logp_all.exp() * logp_all).sum(-1)
        l_ppo = l_ppo - bundle.config.entropy_coef * (ent * mask).sum() / mask.sum()
    l_val = (((out["value"] - mb["ret"]) ** 2) * mask).sum() / mask.sum()
    return l_ppo, l_val


def inference_update(net: RecurrentNet, opt: Adam, batch: RolloutBatch, passes: int, minibatch: int,
                     rng: np.random.Generator):
    """Supervised passes of the latent classifier over whole episodes.

    Returns (mean loss, accuracy measured on the first pass before each update).
    """
    losses, correct, total = [], 0, 0
    prefix = next(iter(opt.params)).split("/")[0]
    for k in range(passes):
        for idx in _minibatches(len(batch.episodes), minibatch, rng):
            mb = batch.padded(idx)
            out, _ = net.unroll(step_inputs(mb, latent_key="latent_in" if net.spec.latent_input else None))
            mask, labels = latent_mask_and_labels(mb["true_latents"], mb["mask"])
            loss = inference_loss_logits(out["latent_logits"], labels, mask)
            if k == 0:
                c, n = accuracy_counts(torch.sigmoid(out["latent_logits"]).detach().numpy(),
                                       np.where(mask.numpy() > 0, mb["true_latents"].numpy(), -1))
                correct, total = correct + c, total + n
            opt.step(_grads(loss, net.parameter_set(prefix)))
            losses.append(float(loss.detach()))
    return float(np.mean(losses)) if losses else 0.0, (correct / total if total else float("nan"))


def train_epoch(bundle: AgentBundle, env: TIntersectionEnv, config: TrainConfig,
                rng: np.random.Generator, epoch: int = 0) -> EpochStats:
    t0 = time.time()
    batch = collect_rollouts(bundle, env, config.steps_per_epoch, rng, LatentSource.GROUND_TRUTH)
    batch.gamma, batch.gae_lambda = config.gamma, config.gae_lambda
    adv = batch.advantages(normalize=True)
    ret = batch.returns()
    pol_params = bundle.optimizers["policy"].params
    val_params = bundle.optimizers["value"].params
    l_ppo_hist, l_val_hist, l_inf_hist = [], [], []
    correct = total = 0

    for k in range(config.ppo_update_passes):
        for idx in _minibatches(len(batch.episodes), config.minibatch_episodes, rng):
            mb = batch.padded(idx, adv, ret)
            inputs = step_inputs(mb, "latent_in" if bundle.policy_uses_latent else None)
            out, _ = bundle.policy.unroll(inputs)
            l_ppo, l_val = _policy_terms(bundle, out, mb, config.clip_epsilon)
            g_val = _grads(l_val, val_params)
            if bundle.mode is Mode.SEPARATED:
                g_pol = _grads(l_ppo, pol_params)
            else:
                mask, labels = latent_mask_and_labels(mb["true_latents"], mb["mask"])
                l_inf = inference_loss_logits(out["latent_logits"], labels, mask)
                l_inf_hist.append(float(l_inf.detach()))
                if k == 0:
                    c, n = accuracy_counts(torch.sigmoid(out["latent_logits"]).detach().numpy(),
                                           np.where(mask.numpy() > 0, mb["true_latents"].numpy(), -1))
                    correct, total = correct + c, total + n
                if bundle.mode is Mode.SHARED:
                    g_pol = _grads(l_ppo, pol_params)
                    g_inf = _grads(l_inf, bundle.optimizers["inference"].params)
                else:
                    g_pol = _grads(l_ppo + config.aux_weight * l_inf, pol_params)
            bundle.optimizers["policy"].step(g_pol)
            bundle.optimizers["value"].step(g_val)
            if bundle.mode is Mode.SHARED:
                bundle.optimizers["inference"].step(g_inf)
            l_ppo_hist.append(float(l_ppo.detach()))
            l_val_hist.append(float(l_val.detach()))

    if bundle.mode is Mode.SEPARATED:
        l_inf, acc = inference_update(bundle.inference, bundle.optimizers["inference"], batch,
                                      config.ppo_update_passes, config.minibatch_episodes, rng)
        l_inf_hist.append(l_inf)
    else:
        acc = correct / total if total else float("nan")

    eps = batch.episodes
    return EpochStats(
        epoch=epoch, env_steps=batch.n_steps,
        mean_return=float(np.mean([e.ret for e in eps])),
        train_success_rate=float(np.mean([e.goal for e in eps])),
        inference_accuracy=acc,
        ppo_loss=float(np.mean(l_ppo_hist)), value_loss=float(np.mean(l_val_hist)),
        inference_loss=float(np.mean(l_inf_hist)) if l_inf_hist else 0.0,
        wall_time_s=time.time() - t0,
    )


@dataclass
class EvalResult:
    success_rate: float
    inference_accuracy: float
    mean_return: float
    episodes: int = 0
    vehicle_steps: int = 0


def evaluate(bundle: AgentBundle | None, env_config: WorldConfig, n_episodes: int,
             rng: np.random.Generator, behavior=None, predictor=None) -> EvalResult:
    """Greedy test-time episodes with inferred latents.

    ``predictor(episode, t) -> probs`` overrides the inference network when scoring
    accuracy (it does not feed the policy); ``behavior`` replaces the policy.
    """
    if n_episodes < 1:
        raise ContractViolation("n_episodes must be >= 1")
    env = TIntersectionEnv(env_config, seed=int(rng.integers(2**63 - 1)))
    act_rng = np.random.default_rng(int(rng.integers(2**63 - 1)))
    batch = collect_rollouts(bundle, env, 1, act_rng, LatentSource.INFERRED, greedy=True,
                             behavior=behavior, max_episodes=n_episodes) if n_episodes else None
    while len(batch.episodes) < n_episodes:
        more = collect_rollouts(bundle, env, 1, act_rng, LatentSource.INFERRED, greedy=True,
                                behavior=behavior, max_episodes=n_episodes - len(batch.episodes))
        batch.episodes.extend(more.episodes)
    correct = total = 0
    for ep in batch.episodes:
        if predictor is not None:
            preds = np.array([predictor(ep, t) for t in range(len(ep))])
        else:
            preds = ep.latent_pred
        if np.isnan(preds).all():
            continue
        c, n = accuracy_counts(np.nan_to_num(preds, nan=0.5), ep.true_latents)
        correct, total = correct + c, total + n
    return EvalResult(
        success_rate=float(np.mean([e.goal for e in batch.episodes])),
        inference_accuracy=correct / total if total else float("nan"),
        mean_return=float(np.mean([e.ret for e in batch.episodes])),
        episodes=len(batch.episodes), vehicle_steps=total,
    )


def inference_accuracy_on(net: RecurrentNet, batch: RolloutBatch, chunk: int = 16) -> float:
    """Per-step accuracy of ``net`` on stored episodes."""
    correct = total = 0
    with torch.no_grad():
        for i in range(0, len(batch.episodes), chunk):
            idx = list(range(i, min(i + chunk, len(batch.episodes))))
            mb = batch.padded(idx)
            out, _ = net.unroll(step_inputs(mb, None))
            mask, _ = latent_mask_and_labels(mb["true_latents"], mb["mask"])
            c, n = accuracy_counts(torch.sigmoid(out["latent_logits"]).numpy(),
                                   np.where(mask.numpy() > 0, mb["true_latents"].numpy(), -1))
            correct, total = correct + c, total + n
    return correct / total if total else float("nan")
