"""Discretization of the population-state space.

Each group's distribution lives on the simplex over ``N_x`` states, sampled by
the lattice ``{k / n : k integer, sum k = n}`` with ``n = resolution - 1``.
Off-lattice points are interpolated barycentrically on the Kuhn triangulation
in cumulative coordinates (exact for affine functions; linear interpolation on
[0, 1] when ``N_x = 2``).  Groups combine by tensor product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from math import comb

import numpy as np

DEFAULT_NODE_BUDGET = 10**6
DOMAIN_TOL = 1e-9


class GridBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class SimplexLattice:
    n_states: int
    resolution: int

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be positive")
        if self.resolution < 2 and self.n_states > 1:
            raise ValueError("resolution must be at least 2")

    @property
    def n(self) -> int:
        return self.resolution - 1

    @property
    def dim(self) -> int:
        return self.n_states - 1

    @property
    def size(self) -> int:
        return comb(self.n + self.dim, self.dim)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Integer cumulative coordinates ``0 <= y_0 <= ... <= y_{d-1} <= n`` of every node."""
        d, n = self.dim, self.n
        if d == 0:
            return np.zeros((1, 0), dtype=int)
        # nondecreasing sequences <-> multisets of size d from {0..n}
        rows = [tuple(c[i] - i for i in range(d)) for c in combinations(range(n + d), d)]
        return np.array(rows, dtype=int)

    @cached_property
    def nodes(self) -> np.ndarray:
        y = self.cumulative
        if self.dim == 0:
            return np.ones((1, 1))
        n = self.n
        full = np.concatenate([np.zeros((len(y), 1), dtype=int), y, np.full((len(y), 1), n)], axis=1)
        return np.diff(full, axis=1) / n

    @cached_property
    def _lookup(self) -> np.ndarray:
        table = -np.ones((self.n + 1,) * self.dim, dtype=np.int64)
        if self.dim:
            table[tuple(self.cumulative.T)] = np.arange(len(self.cumulative))
        return table

    def locate(self, mu):
        """Vertex indices and barycentric weights, each ``(..., d + 1)``."""
        mu = np.asarray(mu, dtype=float)
        batch = mu.shape[:-1]
        d, n = self.dim, self.n
        if d == 0:
            return np.zeros(batch + (1,), dtype=np.int64), np.ones(batch + (1,))
        y = n * np.cumsum(mu[..., :-1], axis=-1)
        y = np.maximum.accumulate(np.clip(y, 0.0, n), axis=-1)
        base = np.minimum(np.floor(y), n - 1).astype(np.int64)
        frac = y - base
        # descending fractional part; ties increment the higher coordinate first
        order = d - 1 - np.argsort(-frac[..., ::-1], axis=-1, kind="stable")
        f_sorted = np.take_along_axis(frac, order, axis=-1)
        weights = np.empty(batch + (d + 1,))
        weights[..., 0] = 1.0 - f_sorted[..., 0]
        if d > 1:
            weights[..., 1:d] = f_sorted[..., :-1] - f_sorted[..., 1:]
        weights[..., d] = f_sorted[..., -1]
        verts = np.empty(batch + (d + 1, d), dtype=np.int64)
        verts[..., 0, :] = base
        cur = base.copy()
        for k in range(d):
            idx = order[..., k : k + 1]
            np.put_along_axis(cur, idx, np.take_along_axis(cur, idx, axis=-1) + 1, axis=-1)
            verts[..., k + 1, :] = cur
        index = self._lookup[tuple(np.moveaxis(verts, -1, 0))]
        if np.any(index[weights > 0] < 0):
            raise AssertionError("interpolation vertex outside the lattice")
        index = np.where(index < 0, 0, index)
        return index, weights


@dataclass(frozen=True)
class MeanFieldGrid:
    """Tensor product of per-group simplex lattices."""

    n_groups: int
    n_states: int
    resolution: int
    node_budget: int = DEFAULT_NODE_BUDGET

    def __post_init__(self):
        if self.size > self.node_budget:
            raise GridBudgetError(
                f"mean-field grid would have {self.size} nodes "
                f"({self.lattice.size} per group ^ {self.n_groups} groups), above the budget {self.node_budget}"
            )

    @classmethod
    def for_model(cls, model, structure, resolution=None, node_budget=DEFAULT_NODE_BUDGET):
        if resolution is None:
            resolution = 101 if (structure.K == 1 and model.n_states == 2) else 11
        return cls(structure.K, model.n_states, int(resolution), node_budget)

    @cached_property
    def lattice(self) -> SimplexLattice:
        return SimplexLattice(self.n_states, self.resolution)

    @property
    def size(self) -> int:
        return self.lattice.size ** self.n_groups

    @cached_property
    def nodes(self) -> np.ndarray:
        """``(P, K, N_x)``; node index is row-major over groups (group 0 slowest)."""
        L = self.lattice.size
        idx = np.indices((L,) * self.n_groups).reshape(self.n_groups, -1).T
        return self.lattice.nodes[idx]

    def locate(self, mu):
        """Node indices and convex weights ``(..., V)`` for states ``(..., K, N_x)``."""
        mu = np.asarray(mu, dtype=float)
        if mu.shape[-2:] != (self.n_groups, self.n_states):
            raise ValueError(f"state shape {mu.shape[-2:]} does not match grid ({self.n_groups}, {self.n_states})")
        if np.any(mu < -DOMAIN_TOL) or np.any(np.abs(mu.sum(-1) - 1) > DOMAIN_TOL):
            from .dynamics import DomainError

            raise DomainError("population state outside the simplex grid")
        idx, w = self.lattice.locate(mu)  # (..., K, d+1)
        L = self.lattice.size
        batch = mu.shape[:-2]
        index = np.zeros(batch + (1,), dtype=np.int64)
        weight = np.ones(batch + (1,))
        for k in range(self.n_groups):
            index = (index[..., :, None] * L + idx[..., k, None, :]).reshape(batch + (-1,))
            weight = (weight[..., :, None] * w[..., k, None, :]).reshape(batch + (-1,))
        return index, weight

    def interpolate(self, table, mu):
        """Interpolate a node table ``(P, ...)`` at states ``(..., K, N_x)``."""
        index, weight = self.locate(mu)
        vals = table[index]  # (..., V, *rest)
        w = weight.reshape(weight.shape + (1,) * (table.ndim - 1))
        return (vals * w).sum(axis=len(weight.shape) - 1)

    def node_index(self, mu, tol=1e-12):
        """Index of the node equal to ``mu`` (within tol), else None."""
        index, weight = self.locate(mu)
        j = int(np.argmax(weight))
        if weight[j] >= 1.0 - tol and np.max(np.abs(self.nodes[index[j]] - mu)) <= tol:
            return int(index[j])
        return None

    def describe(self):
        return {"n_groups": self.n_groups, "n_states": self.n_states, "resolution": self.resolution, "size": self.size}
