"""Graphon kernels, agent-class discretization and statistical equivalence.

The continuum of players on [0, 1] is discretized into ``M`` equal-weight
classes with midpoint representatives.  A :class:`PopulationStructure` is the
coupling matrix the rest of the package works with: either the full ``M x M``
class coupling or its quotient over groups of statistically equivalent classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("complete", "erdos_renyi", "stochastic_block", "random_geometric", "custom")

SYMMETRY_TOL = 1e-12
EQUIVALENCE_TOL = 1e-10


@dataclass(frozen=True)
class Graphon:
    """Symmetric kernel ``g(alpha, beta)`` on the unit square with values in [0, 1].

    Use the constructors (:meth:`complete`, :meth:`erdos_renyi`, ...) rather than
    filling ``params`` by hand.
    """

    kind: str
    params: dict = field(default_factory=dict)
    grid_size: int = 64
    table: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown graphon kind {self.kind!r}; expected one of {KINDS}")
        if self.grid_size < 1:
            raise ValueError("grid_size must be a positive integer")
        p = self.params
        for name in ("p", "p_in", "q_out"):
            if name in p and not 0.0 <= p[name] <= 1.0:
                raise ValueError(f"graphon parameter {name}={p[name]} is not a probability")
        if "cut" in p and not 0.0 <= p["cut"] <= 1.0:
            raise ValueError(f"stochastic block cut={p['cut']} outside [0, 1]")
        if p.get("decay", 0.0) < 0:
            raise ValueError("random geometric decay must be nonnegative")
        if self.kind == "custom":
            t = np.asarray(self.table, dtype=float)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise ValueError("custom graphon table must be a square matrix")
            if np.max(np.abs(t - t.T)) > SYMMETRY_TOL:
                raise ValueError("custom graphon table is not symmetric")
            if t.min() < 0 or t.max() > 1:
                raise ValueError("custom graphon table has entries outside [0, 1]")
            t = 0.5 * (t + t.T)
            t.setflags(write=False)
            object.__setattr__(self, "table", t)
            object.__setattr__(self, "grid_size", t.shape[0])

    @classmethod
    def complete(cls, grid_size=64):
        return cls("complete", {}, grid_size)

    @classmethod
    def erdos_renyi(cls, p, grid_size=64):
        return cls("erdos_renyi", {"p": float(p)}, grid_size)

    @classmethod
    def stochastic_block(cls, p_in, q_out, cut=0.5, grid_size=64):
        return cls("stochastic_block", {"p_in": float(p_in), "q_out": float(q_out), "cut": float(cut)}, grid_size)

    @classmethod
    def random_geometric(cls, decay=1.0, grid_size=64):
        return cls("random_geometric", {"decay": float(decay)}, grid_size)

    @classmethod
    def custom(cls, table):
        t = np.asarray(table, dtype=float)
        return cls("custom", {}, t.shape[0] if t.ndim == 2 else 1, t)

    @classmethod
    def from_csv(cls, path):
        """Load a custom kernel from an M x M CSV matrix (no header)."""
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls.custom(np.array(rows))

    def __call__(self, alpha, beta):
        return evaluate(self, alpha, beta)

    def describe(self) -> dict:
        d = {"kind": self.kind, "params": dict(sorted(self.params.items())), "grid_size": self.grid_size}
        if self.table is not None:
            d["table"] = self.table.tolist()
        return d

    @property
    def label(self) -> str:
        if self.kind == "erdos_renyi":
            return f"erdos_renyi(p={self.params['p']:g})"
        if self.kind == "stochastic_block":
            p = self.params
            return f"stochastic_block(p_in={p['p_in']:g},q_out={p['q_out']:g},cut={p['cut']:g})"
        if self.kind == "random_geometric":
            return f"random_geometric(decay={self.params['decay']:g})"
        return self.kind


def geometric_profile(d, decay=1.0):
    """Non-increasing profile ``exp(-decay * d / (0.5 - d))`` on [0, 0.5], zero at 0.5."""
    d = np.asarray(d, dtype=float)
    if decay == 0:
        return np.ones_like(d)
    out = np.zeros_like(d)
    inner = d < 0.5
    out[inner] = np.exp(-decay * d[inner] / (0.5 - d[inner]))
    return out


def evaluate(g: Graphon, alpha, beta):
    """Kernel value at (alpha, beta); broadcasts over arrays."""
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if np.any((a < 0) | (a > 1)) or np.any((b < 0) | (b > 1)):
        raise ValueError("graphon positions must lie in [0, 1]")
    a, b = np.broadcast_arrays(a, b)
    if g.kind == "complete":
        out = np.ones(a.shape)
    elif g.kind == "erdos_renyi":
        out = np.full(a.shape, g.params["p"])
    elif g.kind == "stochastic_block":
        cut = g.params["cut"]
        same = (a < cut) == (b < cut)
        out = np.where(same, g.params["p_in"], g.params["q_out"])
    elif g.kind == "random_geometric":
        gap = np.abs(b - a)
        out = geometric_profile(np.minimum(gap, 1.0 - gap), g.params["decay"])
    else:
        m = g.table.shape[0]
        i = np.minimum((a * m).astype(int), m - 1)
        j = np.minimum((b * m).astype(int), m - 1)
        out = g.table[i, j]
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AgentClassGrid:
    """``M`` equal-weight classes with midpoints ``(i + 0.5) / M``."""

    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be a positive integer")

    @property
    def points(self) -> np.ndarray:
        return (np.arange(self.M) + 0.5) / self.M

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)

    def class_of(self, positions) -> np.ndarray:
        pos = np.asarray(positions, dtype=float)
        return np.minimum((pos * self.M).astype(int), self.M - 1)


def class_coupling(g: Graphon, grid: AgentClassGrid) -> np.ndarray:
    """Quadrature weights ``C[i, j] = g(alpha_i, alpha_j) * w_j``."""
    if g.kind == "custom" and grid.M != g.grid_size:
        raise ValueError(f"grid has M={grid.M} classes but the custom kernel is {g.grid_size}x{g.grid_size}")
    pts = grid.points
    return evaluate(g, pts[:, None], pts[None, :]) * grid.weights[None, :]


def equitable_partition(coupling: np.ndarray, tol=EQUIVALENCE_TOL) -> list[np.ndarray]:
    """Coarsest partition of classes such that every class in a group sends the
    same total coupling weight into every group.

    Starts from the row-sum split and refines until stable.  Identical
    per-group distributions then stay identical under propagation.
    """
    M = coupling.shape[0]
    labels = np.zeros(M, dtype=int)
    while True:
        n_groups = labels.max() + 1
        into = np.stack([coupling[:, labels == k].sum(axis=1) for k in range(n_groups)], axis=1)
        signature = np.column_stack([labels, into])
        new_labels = _label_rows(signature, tol)
        if new_labels.max() == labels.max():
            break
        labels = new_labels
    return [np.flatnonzero(labels == k) for k in range(labels.max() + 1)]


def _label_rows(sig, tol):
    # groups are numbered in order of first appearance so the result is deterministic
    labels = -np.ones(len(sig), dtype=int)
    reps = []
    for i, row in enumerate(sig):
        for k, r in enumerate(reps):
            if np.max(np.abs(row - r)) <= tol:
                labels[i] = k
                break
        else:
            reps.append(row)
            labels[i] = len(reps) - 1
    return labels


def statistically_equivalent(g: Graphon, grid: AgentClassGrid, model=None):
    """Return ``(all_equivalent, groups)``.

    Groups are the coarsest equitable partition of the class coupling.  A model
    without any interaction term makes every class equivalent regardless of
    the graphon.
    """
    if model is not None and not np.any(model.interaction):
        return True, [np.arange(grid.M)]
    groups = equitable_partition(class_coupling(g, grid))
    return len(groups) == 1, groups


@dataclass(frozen=True)
class PopulationStructure:
    """Coupling between the K population groups the solvers track.

    ``coupling[k, l]`` is the total graphon weight a member of group ``k``
    places on group ``l``; ``weights[k]`` is the Lebesgue mass of group ``k``;
    ``groups[k]`` lists the agent classes merged into it.
    """

    coupling: np.ndarray
    weights: np.ndarray
    groups: tuple
    graphon: Graphon | None = None
    grid: AgentClassGrid | None = None

    @property
    def K(self) -> int:
        return self.coupling.shape[0]

    @property
    def reduced(self) -> bool:
        return self.grid is not None and self.K < self.grid.M

    @classmethod
    def from_graphon(cls, g: Graphon, grid: AgentClassGrid | None = None, model=None, reduce=True):
        grid = grid or AgentClassGrid(g.grid_size)
        C = class_coupling(g, grid)
        if not reduce:
            groups = [np.array([i]) for i in range(grid.M)]
        else:
            _, groups = statistically_equivalent(g, grid, model)
        B = np.array([[C[grp][:, other].sum(axis=1).mean() for other in groups] for grp in groups])
        w = np.array([grid.weights[grp].sum() for grp in groups])
        return cls(B, w, tuple(tuple(int(i) for i in grp) for grp in groups), g, grid)

    @classmethod
    def single(cls, coupling=1.0):
        """One homogeneous group with scalar coupling (a plain mean-field game)."""
        return cls(np.array([[float(coupling)]]), np.array([1.0]), ((0,),))

    def group_of_class(self) -> np.ndarray:
        out = np.empty(sum(len(g) for g in self.groups), dtype=int)
        for k, grp in enumerate(self.groups):
            out[list(grp)] = k
        return out

    def describe(self) -> dict:
        return {
            "graphon": self.graphon.describe() if self.graphon else None,
            "M": self.grid.M if self.grid else None,
            "K": self.K,
            "coupling": self.coupling.tolist(),
        }


def load_graphon(spec: dict, base_dir: Path | None = None) -> Graphon:
    """Build a graphon from a config mapping ``{kind, params}``."""
    kind = spec.get("kind")
    params = dict(spec.get("params") or {})
    M = int(spec.get("grid_size", params.pop("grid_size", 64)))
    if kind == "complete":
        return Graphon.complete(M)
    if kind == "erdos_renyi":
        return Graphon.erdos_renyi(params.get("p", 0.8), M)
    if kind == "stochastic_block":
        return Graphon.stochastic_block(params.get("p_in", 0.9), params.get("q_out", 0.4), params.get("cut", 0.5), M)
    if kind == "random_geometric":
        return Graphon.random_geometric(params.get("decay", 1.0), M)
    if kind == "custom":
        path = Path(params["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return Graphon.from_csv(path)
    raise ValueError(f"unknown graphon kind {kind!r}")


def reference_graphons(grid_size=64):
    """The four kernels of the malware experiment."""
    return [
        Graphon.complete(grid_size),
        Graphon.erdos_renyi(0.8, grid_size),
        Graphon.stochastic_block(0.9, 0.4, 0.5, grid_size),
        Graphon.random_geometric(1.0, grid_size),
    ]
