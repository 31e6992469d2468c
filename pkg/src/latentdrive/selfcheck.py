"""Fast built-in correctness checks: gradients, GAE, simulator determinism and
the IDM jam equilibrium.  Each check returns ``(ok, detail)``.
"""

from __future__ import annotations

import contextlib
import os
import time

import numpy as np
import torch

from .env import TIntersectionEnv
from .nn.autodiff import DTYPE, Adam, ParameterSet, gradient_check
from .nn.layers import GATConv, GCNConv, Linear, LSTMCell, SageConv
from .nn.networks import Head, NetKind, NetworkSpec, StepInput, build_network
from .sim import (DriverProfile, Lane, Style, SurroundingVehicle, World, WorldConfig, WorldState,
                  _ego_as_leader, _surrounding_accels, step_world)
from .trainer import (AgentBundle, LatentSource, Mode, TrainConfig, _grads, _policy_terms, collect_rollouts,
                      compute_gae, inference_update, ppo_loss, step_inputs)

GRAD_TOL = 1e-5
FD_STEP = 1e-5
CORRUPT_ENV = "LATENTDRIVE_SELFCHECK_CORRUPT"
LAYER_CHECKS = ("linear", "lstm", "sage", "gat", "gcn", "stgsage")


@contextlib.contextmanager
def corrupted_gradient(module: torch.nn.Module, scale: float = 1.01):
    """Scale ``module``'s backward pass while leaving its forward values intact."""
    orig = module.forward

    def forward(*args, **kw):
        out = orig(*args, **kw)
        first = out[0] if isinstance(out, tuple) else out
        bent = first + (scale - 1.0) * (first - first.detach())
        return (bent, *out[1:]) if isinstance(out, tuple) else bent

    module.forward = forward
    try:
        yield module
    finally:
        module.forward = orig


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


def _graph(gen, b, n):
    adj = (torch.rand(b, n, n, generator=gen, dtype=DTYPE) < 0.5).to(DTYPE)
    adj = adj * (1 - torch.eye(n, dtype=DTYPE))
    adj[:, 0, 1:] = 1.0  # ego hears everyone
    return adj


def _layer_problem(name: str, seed: int = 0):
    """(module, loss_fn) for one gradient check; loss is a fixed projection of the output."""
    gen = torch.Generator().manual_seed(seed)
    if name == "linear":
        m = Linear(4, 3, gen)
        x, w = _rand(gen, 5, 4), _rand(gen, 5, 3)
        return m, lambda: (m(x) * w).sum()
    if name == "lstm":
        m = LSTMCell(3, 4, gen)
        xs = [_rand(gen, 2, 3) for _ in range(3)]
        w = _rand(gen, 2, 4)

        def loss():
            st = (torch.zeros(2, 4, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE))
            total = 0.0
            for x in xs:
                h, st = m(x, st)
                total = total + (h * w).sum() + (st[1] * w).sum() * 0.5
            return total
        return m, loss
    if name in ("sage", "gat", "gcn"):
        cls = {"sage": SageConv, "gat": GATConv, "gcn": GCNConv}[name]
        m = cls(3, 4, gen=gen) if name == "gat" else cls(3, 4, gen)
        h, adj = _rand(gen, 2, 4, 3), _graph(gen, 2, 4)
        mask = torch.tensor([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=DTYPE)
        w = _rand(gen, 2, 4, 4)
        return m, lambda: (m(h, adj, mask) * w).sum()
    if name == "stgsage":
        spec = NetworkSpec(kind=NetKind.STGSAGE, hidden_units=3, node_dim=3, conv_layers=2,
                           heads=frozenset(Head), latent_input=True, n_surrounding=2)
        m = build_network(spec, seed)
        steps = []
        for _ in range(3):
            slots = _rand(gen, 1, 3, 5)
            slots[..., 4] = 1.0
            steps.append(StepInput(slots, _rand(gen, 1).abs() * 10, _graph(gen, 1, 3),
                                   torch.rand(1, 2, generator=gen, dtype=DTYPE)))
        wl, wv, wz = _rand(gen, 3, 1, 3), _rand(gen, 3, 1), _rand(gen, 3, 1, 2)

        def loss():
            out, _ = m.unroll(steps)
            return (out["logits"] * wl).sum() + (out["value"] * wv).sum() + (out["latent_logits"] * wz).sum()
        return m, loss
    raise KeyError(name)


def check_gradient(name: str, corrupt: str | None = None):
    m, loss = _layer_problem(name)
    target = m
    if corrupt == name and name == "stgsage":
        target = m.convs[0]
    ctx = corrupted_gradient(target) if corrupt == name else contextlib.nullcontext()
    with ctx:
        errs = gradient_check(loss, ParameterSet.from_module(m), FD_STEP)
    worst = max(errs, key=errs.get)
    return errs[worst] < GRAD_TOL, f"max relative error {errs[worst]:.2e} ({worst})"


def discounted_reward_to_go(rewards, gamma):
    out = np.zeros(len(rewards))
    for t in range(len(rewards)):
        out[t] = sum(gamma ** k * rewards[t + k] for k in range(len(rewards) - t))
    return out


def check_gae(n_episodes: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_episodes):
        n = int(rng.integers(1, 21))
        r, v = rng.normal(size=n), rng.normal(size=n)
        gamma = float(rng.uniform(0.5, 1.0))
        d = np.zeros(n)
        d[-1] = 1
        adv, ret = compute_gae(r, v, d, gamma, 1.0)
        mc = discounted_reward_to_go(r, gamma)
        worst = max(worst, float(np.max(np.abs(adv - (mc - v)))), float(np.max(np.abs(ret - mc))))
    a, _ = compute_gae([1, 1], [0.5, 0.25], [0, 1], 0.9, 0.8)
    ex = float(np.max(np.abs(a - np.array([1.265, 0.75]))))
    ok = worst < 1e-10 and ex < 1e-12
    return ok, f"lambda=1 max diff {worst:.1e}; two-step example diff {ex:.1e}"


def trajectory(seed: int, n_steps: int = 100, config: WorldConfig | None = None):
    env = TIntersectionEnv(config or WorldConfig(), seed=seed)
    act_rng = np.random.default_rng(seed + 1)
    obs, info = env.reset()
    out = [obs.flatten()]
    for _ in range(n_steps):
        res = env.step(int(act_rng.integers(3)))
        out.append(res.observation.flatten())
        out.append(np.array([res.reward]))
        if res.done:
            obs, info = env.reset()
            out.append(obs.flatten())
    return np.concatenate(out)


def bandit_ppo(seed: int, max_updates: int = 200, batch: int = 32, lr: float = 0.03, eps: float = 0.2,
               target: float = 0.95):
    """PPO on a two-armed bandit paying 1 for arm 0 and 0 for arm 1.

    Returns the number of updates until P(arm 0) > ``target``, or None.
    """
    rng = np.random.default_rng(seed)
    logits = torch.zeros(2, dtype=DTYPE, requires_grad=True)
    opt = Adam(ParameterSet(logits=logits), lr)
    for k in range(1, max_updates + 1):
        with torch.no_grad():
            probs = torch.softmax(logits, -1).numpy()
        acts = rng.choice(2, size=batch, p=probs)
        r = (acts == 0).astype(np.float64)
        adv = r - r.mean()
        if adv.std() > 0:
            adv = adv / adv.std()
        old = torch.from_numpy(np.log(probs[acts]))
        new = torch.log_softmax(logits, -1)[torch.from_numpy(acts)]
        loss = ppo_loss(new, old, torch.from_numpy(adv), eps)
        opt.step({"logits": torch.autograd.grad(loss, logits)[0]})
        if float(torch.softmax(logits.detach(), -1)[0]) > target:
            return k
    return None


def check_bandit(seeds=(0, 1, 2), max_updates: int = 200):
    took = [bandit_ppo(s, max_updates) for s in seeds]
    ok = all(t is not None for t in took)
    return ok, f"updates to P(A) > 0.95 per seed: {took}"


def check_mode_isolation(seed: int = 0):
    """SEPARATED: policy steps leave inference weights untouched and vice versa."""
    cfg = TrainConfig(mode=Mode.SEPARATED, steps_per_epoch=120, ppo_update_passes=1, minibatch_episodes=4)
    bundle = AgentBundle.build(Mode.SEPARATED, config=cfg, seed=seed)
    env = TIntersectionEnv(seed=seed)
    rng = np.random.default_rng(seed)
    batch = collect_rollouts(bundle, env, cfg.steps_per_epoch, rng, LatentSource.GROUND_TRUTH)
    adv, ret = batch.advantages(), batch.returns()
    pol0 = bundle.policy_parameters().checksum()
    inf0 = bundle.inference_parameters().checksum()
    inference_update(bundle.inference, bundle.optimizers["inference"], batch, 2, 4, rng)
    inf1 = bundle.inference_parameters().checksum()
    pol_same = bundle.policy_parameters().checksum() == pol0
    mb = batch.padded(list(range(len(batch.episodes))), adv, ret)
    out, _ = bundle.policy.unroll(step_inputs(mb, "latent_in"))
    l_ppo, l_val = _policy_terms(bundle, out, mb, cfg.clip_epsilon)
    g_pol = _grads(l_ppo, bundle.optimizers["policy"].params)
    g_val = _grads(l_val, bundle.optimizers["value"].params)
    bundle.optimizers["policy"].step(g_pol)
    bundle.optimizers["value"].step(g_val)
    inf_same = bundle.inference_parameters().checksum() == inf1
    moved = inf1 != inf0 and bundle.policy_parameters().checksum() != pol0
    ok = pol_same and inf_same and moved
    return ok, (f"policy unchanged by inference steps: {pol_same}; inference unchanged by policy steps: "
                f"{inf_same}; both moved under their own optimizer: {moved}")


def check_determinism(seed: int = 3):
    a, b = trajectory(seed), trajectory(seed)
    same = a.shape == b.shape and a.tobytes() == b.tobytes()
    return same, f"{len(a)} values {'bit-identical' if same else 'differ'}"


def build_jam_world(gap_factor: float = 0.65, n: int = 2, config: WorldConfig | None = None,
                    ego_progress: float = 9.5) -> World:
    """Stopped ego inside the lower lane with ``n`` conservative drivers queued
    behind it, all at rest and spaced at their scaled minimum gap."""
    cfg = config or WorldConfig(accel_noise_std=0.0, noise_std=(0.0, 0.0))
    world = World(cfg, np.random.default_rng(0))
    world.state = WorldState(ego_progress=ego_progress, ego_speed=0.0)
    g = cfg.geometry
    gap = gap_factor * cfg.idm.min_spacing
    probe = SurroundingVehicle(1, Lane.LOWER, 0.0, 0.0, DriverProfile(Style.CONSERVATIVE, gap_factor, True))
    _, _, tx, ty = world.ego_pose()
    ego_gap, _ = _ego_as_leader(world, probe, world.ego_state(), tx, ty)
    u = ego_gap - gap  # probe at u=0 sees ego_gap
    for k in range(n):
        world.state.surrounding.append(SurroundingVehicle(
            k + 1, Lane.LOWER, u, 0.0, DriverProfile(Style.CONSERVATIVE, gap_factor, True)))
        u -= g.vehicle_length + gap
    world.state.next_spawn_gap = [g.lane_length * 10, g.lane_length * 10]
    return world


def check_idm_equilibrium(n_steps: int = 100, tol: float = 1e-6):
    world = build_jam_world()
    start = {v.slot: v.u for v in world.state.surrounding}
    a0 = max(abs(a) for a in _surrounding_accels(world).values())
    if a0 > 1e-9:
        return False, f"queued drivers not at rest: |a| = {a0:.1e}"
    worst = 0.0
    for _ in range(n_steps):
        world, ev = step_world(world, 0.0)
        if ev.terminal and not ev.timeout:
            return False, f"scene terminated early: {ev}"
        for v in world.state.surrounding:
            if v.slot in start:
                worst = max(worst, abs(v.u - start[v.slot]))
    return worst < tol, f"max drift {worst:.1e} m over {n_steps} steps (initial |a| {a0:.1e})"


def all_checks(corrupt: str | None = None):
    checks = [(f"grad_{n}", (lambda n=n: check_gradient(n, corrupt))) for n in LAYER_CHECKS]
    checks += [("gae_oracle", check_gae), ("sim_determinism", check_determinism),
               ("idm_equilibrium", check_idm_equilibrium), ("ppo_bandit", check_bandit),
               ("mode_isolation", check_mode_isolation)]
    return checks


def run_selfcheck(corrupt: str | None = None, out=print) -> bool:
    """Run every check, printing one PASS/FAIL line per check; True if all pass."""
    corrupt = corrupt or os.environ.get(CORRUPT_ENV) or None
    ok_all = True
    t0 = time.time()
    for name, fn in all_checks(corrupt):
        t = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure of that check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{time.time() - t:.2f}s]")
    out(f"{'PASS' if ok_all else 'FAIL'} selfcheck total {time.time() - t0:.1f}s")
    return ok_all
