"""Parameter containers, backward pass, Adam, and a finite-difference oracle.

Reverse-mode differentiation itself is delegated to ``torch.autograd``; every
tensor here is 64-bit.  The finite-difference routines never touch autograd so
they can be used to check it.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable

import numpy as np
import torch

from ..errors import ContractViolation

DTYPE = torch.float64


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.float64)).clone().requires_grad_(requires_grad)


class ParameterSet(dict):
    """Ordered map from a slash-separated path to a leaf tensor."""

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParameterSet":
        out = cls()
        for name, p in module.named_parameters():
            key = name.replace(".", "/")
            out[f"{prefix}/{key}" if prefix else key] = p
        return out

    def count(self) -> int:
        return sum(p.numel() for p in self.values())

    def subset(self, prefix: str) -> "ParameterSet":
        return ParameterSet((k, v) for k, v in self.items() if k.startswith(prefix))

    def without(self, prefix: str) -> "ParameterSet":
        return ParameterSet((k, v) for k, v in self.items() if not k.startswith(prefix))

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: (None if p.grad is None else p.grad.detach().clone()) for k, p in self.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(self[k].detach().cpu().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def numpy(self) -> dict:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.items()}


def backward(loss: torch.Tensor):
    """Accumulate d(loss)/d(param) into ``.grad`` of every leaf reachable from ``loss``."""
    if loss.numel() != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


class Adam:
    """Adam over one ParameterSet; moments are private to this instance."""

    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self._opt = torch.optim.Adam(list(params.values()), lr=lr, betas=betas, eps=eps)

    @property
    def lr(self) -> float:
        return self._opt.param_groups[0]["lr"]

    def zero_grad(self):
        self.params.zero_grad()

    def step(self, grads: dict | None = None):
        """Apply one update; ``grads`` (path -> tensor) overrides the stored ``.grad``."""
        if grads is not None:
            for k, p in self.params.items():
                g = grads.get(k)
                if g is None:
                    p.grad = None
                    continue
                if tuple(g.shape) != tuple(p.shape):
                    raise ContractViolation(f"gradient for {k} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
                p.grad = g.detach().clone()
        self._opt.step()

    def state_dict(self):
        return self._opt.state_dict()


def finite_difference_gradients(fn: Callable[[], torch.Tensor], params: ParameterSet,
                                h: float = 1e-5) -> dict:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``params``."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn())
                flat[i] = orig - h
                fm = float(fn())
                flat[i] = orig
                g[i] = (fp - fm) / (2 * h)
            out[name] = g.reshape(tuple(p.shape))
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(fn: Callable[[], torch.Tensor], params: ParameterSet, h: float = 1e-5) -> dict:
    """Per-parameter relative error between autograd and central differences."""
    params.zero_grad()
    backward(fn())
    analytic = {k: (np.zeros(tuple(p.shape)) if p.grad is None else p.grad.detach().numpy().copy())
                for k, p in params.items()}
    params.zero_grad()
    numeric = finite_difference_gradients(fn, params, h)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}
