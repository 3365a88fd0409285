"""Exact discrete optimal transport and mean-embedding matching.

The EMD solver is a transportation simplex (north-west corner start,
u-v potentials, stepping-stone pivots). Besides the optimal plan it returns
the dual potentials, which give a subgradient of the cost with respect to
the source marginal.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SIMPLEX_TOL = 1e-6


class TransportError(ValueError):
    pass


@dataclass(frozen=True)
class GroundMetric:
    d: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise TransportError("ground metric must be a square matrix")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise TransportError("ground distances must be finite and nonnegative")
        if np.any(np.diag(d) != 0):
            raise TransportError("ground metric must have a zero diagonal")
        if not np.allclose(d, d.T, rtol=0, atol=1e-12):
            raise TransportError("ground metric must be symmetric")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def size(self) -> int:
        return self.d.shape[0]

    @property
    def is_metric(self) -> bool:
        """True when the triangle inequality holds for every triple."""
        d = self.d
        via = d[:, :, None] + d[None, :, :]  # via[i, k, j] = d[i,k] + d[k,j]
        return bool(np.all(d <= via.min(axis=1) + 1e-12))

    @classmethod
    def zero_one(cls, c: int) -> "GroundMetric":
        return cls(1.0 - np.eye(c))

    def scaled(self, factor: float) -> "GroundMetric":
        return GroundMetric(self.d * factor)


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    cost: float
    row_potentials: np.ndarray
    col_potentials: np.ndarray
    pivots: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "target", "mass"])
            for i, j in zip(*np.nonzero(self.plan)):
                w.writerow([int(i), int(j), repr(float(self.plan[i, j]))])


def _check_marginal(v, name: str, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != n:
        raise TransportError(f"{name} has length {v.size}, ground metric expects {n}")
    if np.any(v < -SIMPLEX_TOL) or not np.all(np.isfinite(v)) or abs(v.sum() - 1.0) > SIMPLEX_TOL:
        raise TransportError(f"infeasible marginals: {name} is not on the simplex")
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def _northwest_corner(p: np.ndarray, q: np.ndarray):
    m, n = len(p), len(q)
    flow = np.zeros((m, n))
    basis = []
    s, t = p.copy(), q.copy()
    i = j = 0
    while True:
        x = min(s[i], t[j])
        flow[i, j] = x
        basis.append((i, j))
        s[i] -= x
        t[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1 or s[i] <= t[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(basis, d: np.ndarray, m: int, n: int):
    """Solve u_i + v_j = d_ij on the spanning tree, anchoring u_0 = 0."""
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    pot = np.full(m + n, np.nan)
    parent = np.full(m + n, -1)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in adj[a]:
            if np.isnan(pot[b]):
                i, j = (a, b - m) if a < m else (b, a - m)
                pot[b] = d[i, j] - pot[a]
                parent[b] = a
                queue.append(b)
    return pot[:m], pot[m:], parent


def _tree_path(parent: np.ndarray, start: int) -> list[int]:
    path = [start]
    while parent[path[-1]] >= 0:
        path.append(int(parent[path[-1]]))
    return path


def emd(p, q, g: GroundMetric, max_pivots: int | None = None) -> TransportPlan:
    """Exact minimum-cost plan between ``p`` and ``q`` under ground metric ``g``."""
    n = g.size
    p = _check_marginal(p, "p", n)
    q = _check_marginal(q, "q", n)
    d = g.d
    m = n
    flow, basis = _northwest_corner(p, q)
    scale = max(1.0, float(np.abs(d).max()))
    tol = 1e-12 * scale
    limit = max_pivots or 200 * m * n
    bland_after = 20 * m * n
    pivots = 0
    while True:
        u, v, parent = _potentials(basis, d, m, n)
        reduced = d - u[:, None] - v[None, :]
        if pivots < bland_after:
            flat = int(np.argmin(reduced))
            if reduced.flat[flat] >= -tol:
                break
        else:
            # Bland's rule from here on; guarantees termination under degeneracy
            cand = np.flatnonzero(reduced.ravel() < -tol)
            if cand.size == 0:
                break
            flat = int(cand[0])
        if pivots >= limit:
            raise TransportError("transport simplex did not converge")
        ei, ej = divmod(flat, n)
        # tree is rooted at row 0; cycle = entering cell + tree path row ei .. col ej
        path_i = _tree_path(parent, ei)
        path_j = _tree_path(parent, m + ej)
        common = set(path_i)
        k = next(idx for idx, node in enumerate(path_j) if node in common)
        lca = path_j[k]
        nodes = path_j[: k + 1] + path_i[: path_i.index(lca)][::-1]
        # nodes runs col ej -> ... -> row ei; consecutive pairs are basic cells
        cells = []
        for a, b in zip(nodes[:-1], nodes[1:]):
            cells.append((a, b - m) if a < m else (b, a - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min((c for c in minus if flow[c] <= theta + 1e-15), key=lambda c: c[0] * n + c[1])
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        basis.append((ei, ej))
        pivots += 1
    flow = np.clip(flow, 0.0, None)
    return TransportPlan(flow, float(np.sum(flow * d)), u, v, pivots)


def emd_cost_gradient(p, q, g: GroundMetric) -> np.ndarray:
    """Row potentials of an optimal dual, anchored so that index 0 is zero."""
    return emd(p, q, g).row_potentials.copy()


class _EMDCost(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p: torch.Tensor, q: np.ndarray, metric: GroundMetric):
        p_np = p.detach().double().cpu().numpy()
        costs = np.empty(len(p_np))
        grads = np.empty_like(p_np)
        for i, (pi, qi) in enumerate(zip(p_np, q)):
            plan = emd(pi, qi, metric)
            costs[i] = plan.cost
            grads[i] = plan.row_potentials
        ctx.save_for_backward(torch.from_numpy(grads).to(p.dtype))
        return torch.from_numpy(costs).to(p.dtype)

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (grads,) = ctx.saved_tensors
        return grad_out[:, None] * grads, None, None


def emd_batch(p: torch.Tensor, q, metric: GroundMetric) -> torch.Tensor:
    """Per-row EMD cost between predicted distributions ``p`` (B, C) and targets ``q``.

    Differentiable in ``p``; the backward pass uses the dual potentials.
    """
    q = np.asarray(q.detach().double().cpu().numpy() if isinstance(q, torch.Tensor) else q, dtype=np.float64)
    if q.shape != tuple(p.shape):
        raise TransportError(f"target shape {q.shape} does not match prediction shape {tuple(p.shape)}")
    return _EMDCost.apply(p, q, metric)


def mean_embedding_gap(real_features, synth_features):
    """Squared Euclidean distance between the two feature means.

    Accepts torch tensors (differentiable) or array-likes (returns a float).
    """
    as_torch = isinstance(real_features, torch.Tensor) or isinstance(synth_features, torch.Tensor)
    if as_torch:
        real = torch.as_tensor(real_features)
        synth = torch.as_tensor(synth_features)
    else:
        real = np.asarray(real_features, dtype=np.float64)
        synth = np.asarray(synth_features, dtype=np.float64)
    if real.ndim != 2 or synth.ndim != 2 or len(real) == 0 or len(synth) == 0:
        raise ValueError("feature lists must be nonempty 2-D batches")
    if real.shape[1] != synth.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    diff = real.mean(0) - synth.mean(0)
    gap = (diff * diff).sum()
    return gap if as_torch else float(gap)
