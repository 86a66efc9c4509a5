"""Dynamic-filter graph convolution with soft filter assignment, plus dense layers.

For a vertex ``i`` with neighborhood ``N_i`` the convolution computes::

    y_i = b + sum_m 1/|N_i| sum_{j in N_i} q_m(x_i, x_j) W_m x_j
    q_m(x_i, x_j) = softmax_m(u_m . (x_i - x_j) + c_m)
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag

__all__ = ["assignment_weights", "FeaStConv", "Dense", "conv_forward", "xavier_uniform", "ACTIVATIONS"]


def xavier_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def assignment_weights(x_i, x_j, u, c):
    """Soft assignment of the pair ``(x_i, x_j)`` to each of the ``M`` filters.

    Parameters
    ----------
    x_i, x_j : ndarray, shape (in_dim,)
    u : ndarray, shape (M, in_dim)
    c : ndarray, shape (M,)

    Returns
    -------
    ndarray, shape (M,)
        Positive weights summing to one.
    """
    logits = np.asarray(u) @ (np.asarray(x_i, dtype=np.float64) - np.asarray(x_j, dtype=np.float64)) + c
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


class Module:
    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self):
        raise NotImplementedError

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self


def _batched_edges(graph, include_self, batch):
    key = ("batched", bool(include_self), batch)
    cache = graph._edge_cache
    if key not in cache:
        centers, members = graph.edge_index(include_self)
        deg = graph.degrees(include_self)
        if np.any(deg == 0):
            raise ValueError(f"isolated vertex {int(np.argmax(deg == 0))} has an empty neighborhood")
        n = graph.n_vertices
        offsets = (np.arange(batch) * n)[:, None]
        c = (centers[None, :] + offsets).ravel()
        m = (members[None, :] + offsets).ravel()
        inv = np.tile(1.0 / deg[centers], batch)[:, None]
        cache[key] = (c, m, inv)
    return cache[key]


class FeaStConv(Module):
    """Graph convolution layer with ``M`` filters and learned soft assignment.

    Parameters
    ----------
    in_dim, out_dim : int
        Feature widths.
    M : int
        Number of weight matrices.
    include_self : bool
        Count vertex ``i`` as a member of its own neighborhood.
    """

    def __init__(self, in_dim, out_dim, M=8, include_self=True, rng=None, name="conv"):
        if M < 1 or in_dim < 1 or out_dim < 1:
            raise ValueError("M, in_dim and out_dim must be positive")
        rng = np.random.default_rng(rng)
        self.in_dim, self.out_dim, self.M = in_dim, out_dim, M
        self.include_self = include_self
        self.name = name
        self.W = ag.Parameter(xavier_uniform(rng, in_dim, out_dim, (M, out_dim, in_dim)), f"{name}.W")
        self.u = ag.Parameter(xavier_uniform(rng, in_dim, M, (M, in_dim)), f"{name}.u")
        self.c = ag.Parameter(np.zeros(M), f"{name}.c")
        self.b = ag.Parameter(np.zeros(out_dim), f"{name}.b")

    def named_parameters(self):
        return [(p.name, p) for p in (self.W, self.u, self.c, self.b)]

    def __call__(self, x, graph, batch=1):
        return conv_forward(x, graph, self, batch)


def conv_forward(features, graph, layer, batch=1):
    """Apply ``layer`` to per-vertex ``features`` of shape ``(batch * N, in_dim)``.

    Batches are stacked row-wise; sample ``k`` occupies rows ``k*N ... (k+1)*N - 1``.
    """
    x = ag.as_tensor(features)
    n = graph.n_vertices
    if x.shape != (batch * n, layer.in_dim):
        raise ag.ShapeError(
            f"conv_forward: features of shape {x.shape} for {batch} x {n} vertices and in_dim {layer.in_dim}"
        )
    centers, members, inv_deg = _batched_edges(graph, layer.include_self, batch)
    M, E = layer.M, len(members)

    xj = ag.gather_rows(x, members)  # (E, in)
    diff = ag.gather_rows(x, centers) - xj
    logits = diff @ ag.transpose(layer.u) + layer.c  # (E, M)
    a = ag.softmax(logits, axis=1) * inv_deg  # neighborhood average folded into q

    # Z[i, m] = sum_j a_ijm x_j, then y_i = b + sum_m W_m Z[i, m]
    weighted = ag.einsum("em,ek->emk", a, xj)
    z = ag.scatter_add_rows(ag.reshape(weighted, (E, M * layer.in_dim)), centers, batch * n)
    w_stack = ag.reshape(ag.transpose(layer.W, (0, 2, 1)), (M * layer.in_dim, layer.out_dim))
    return z @ w_stack + layer.b


class Dense(Module):
    """Affine layer ``x @ W + b`` on row vectors."""

    def __init__(self, in_dim, out_dim, rng=None, name="dense"):
        rng = np.random.default_rng(rng)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = ag.Parameter(xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim)), f"{name}.W")
        self.b = ag.Parameter(np.zeros(out_dim), f"{name}.b")

    def named_parameters(self):
        return [(self.W.name, self.W), (self.b.name, self.b)]

    def __call__(self, x):
        return ag.matmul(x, self.W) + self.b


ACTIVATIONS = {
    "elu": ag.elu,
    "identity": lambda t: t,
}
