"""Linear, LSTM cell and graph-convolution layers over dense batched tensors.

Graph layers take node embeddings ``h`` of shape ``(..., N, F)``, a dense
adjacency ``adj`` of shape ``(..., N, N)`` with ``adj[i, j] = 1`` meaning an
edge j -> i (j influences i), and an optional node mask ``(..., N)``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from ..errors import ContractViolation
from .autodiff import DTYPE


def _uniform(shape, bound, gen):
    return nn.Parameter((torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


def _check_last_dim(x, expected, what):
    if x.shape[-1] != expected:
        raise ContractViolation(f"{what}: expected last dimension {expected}, got {x.shape[-1]}")


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, gen: torch.Generator | None = None):
        super().__init__()
        bound = 1 / math.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = _uniform((n_out, n_in), bound, gen)
        self.bias = _uniform((n_out,), bound, gen)

    def forward(self, x):
        _check_last_dim(x, self.n_in, "linear")
        return x @ self.weight.T + self.bias


class LSTMCell(nn.Module):
    """Single LSTM cell, gate order (input, forget, candidate, output)."""

    def __init__(self, n_in: int, n_hidden: int, gen: torch.Generator | None = None,
                 forget_bias: float = 1.0):
        super().__init__()
        self.n_in, self.n_hidden = n_in, n_hidden
        bound = 1 / math.sqrt(n_hidden)
        self.w_ih = _uniform((4 * n_hidden, n_in), bound, gen)
        self.w_hh = _uniform((4 * n_hidden, n_hidden), bound, gen)
        bias = _uniform((4 * n_hidden,), bound, gen)
        with torch.no_grad():
            bias[n_hidden:2 * n_hidden] = forget_bias
        self.bias = bias

    def forward(self, x, state):
        h, c = state
        _check_last_dim(x, self.n_in, "lstm input")
        _check_last_dim(h, self.n_hidden, "lstm hidden")
        gates = x @ self.w_ih.T + h @ self.w_hh.T + self.bias
        i, f, g, o = gates.chunk(4, dim=-1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, (h_new, c_new)


class SageConv(nn.Module):
    """GraphSAGE update: ReLU(W [h_i ; mean_{j in N(i)} h_j] + b)."""

    def __init__(self, n_in: int, n_out: int, gen: torch.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.lin = Linear(2 * n_in, n_out, gen)

    def forward(self, h, adj, mask=None):
        _check_last_dim(h, self.n_in, "sage")
        deg = adj.sum(-1, keepdim=True)
        # summing sorted neighbour values makes the mean exactly order independent
        nb = torch.sort(adj.unsqueeze(-1) * h.unsqueeze(-3), dim=-2).values
        agg = nb.sum(-2) / deg.clamp(min=1.0)
        out = torch.relu(self.lin(torch.cat([h, agg], dim=-1)))
        return out if mask is None else out * mask.unsqueeze(-1)


class GCNConv(nn.Module):
    """Kipf-Welling update with self loops and symmetric degree normalisation."""

    def __init__(self, n_in: int, n_out: int, gen: torch.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.lin = Linear(n_in, n_out, gen)

    def forward(self, h, adj, mask=None):
        _check_last_dim(h, self.n_in, "gcn")
        a_hat = adj + torch.eye(adj.shape[-1], dtype=adj.dtype)
        d = a_hat.sum(-1).rsqrt()
        norm = d.unsqueeze(-1) * a_hat * d.unsqueeze(-2)
        out = torch.relu(norm @ (h @ self.lin.weight.T) + self.lin.bias)
        return out if mask is None else out * mask.unsqueeze(-1)


class GATConv(nn.Module):
    """Multi-head graph attention over in-neighbours plus self; heads are averaged."""

    def __init__(self, n_in: int, n_out: int, heads: int = 2, gen: torch.Generator | None = None,
                 negative_slope: float = 0.2):
        super().__init__()
        self.n_in, self.n_out, self.heads = n_in, n_out, heads
        self.negative_slope = negative_slope
        self.weight = _uniform((heads, n_out, n_in), 1 / math.sqrt(n_in), gen)
        self.att_src = _uniform((heads, n_out), 1 / math.sqrt(n_out), gen)
        self.att_dst = _uniform((heads, n_out), 1 / math.sqrt(n_out), gen)
        self.bias = _uniform((n_out,), 1 / math.sqrt(n_in), gen)

    def attention(self, h, adj):
        """Attention weights of shape (..., heads, N, N); rows sum to one."""
        wh = torch.einsum("...nf,kof->...kno", h, self.weight)
        s_src = (wh * self.att_src.unsqueeze(-2)).sum(-1)  # (..., K, N)
        s_dst = (wh * self.att_dst.unsqueeze(-2)).sum(-1)
        scores = torch.nn.functional.leaky_relu(s_dst.unsqueeze(-1) + s_src.unsqueeze(-2),
                                                self.negative_slope)
        allowed = (adj + torch.eye(adj.shape[-1], dtype=adj.dtype)) > 0
        scores = scores.masked_fill(~allowed.unsqueeze(-3), float("-inf"))
        return torch.softmax(scores, dim=-1), wh

    def forward(self, h, adj, mask=None):
        _check_last_dim(h, self.n_in, "gat")
        alpha, wh = self.attention(h, adj)
        out = torch.relu((alpha @ wh).mean(-3) + self.bias)
        return out if mask is None else out * mask.unsqueeze(-1)


CONV_TYPES = {"sage": SageConv, "gat": GATConv, "gcn": GCNConv}
