"""Finite-N validation on W-random graphs.

Agents sit at positions on [0, 1], edges are independent Bernoulli draws with
the graphon value as probability, and each agent's aggregate drive is the
neighbour sum normalized by ``1 / N`` (the empirical analogue of the graphon
integral).  Every agent observes the per-group empirical state distribution
and acts with the equilibrium prescription evaluated there.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .graphon import Graphon, evaluate

BLOCK = 1024


@dataclass(frozen=True)
class SampledNetwork:
    N: int
    positions: np.ndarray
    adjacency: np.ndarray  # (N, N) bool, symmetric, zero diagonal
    seed: int
    graphon: Graphon | None = None

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.adjacency)) // 2

    @property
    def density(self) -> float:
        pairs = self.N * (self.N - 1) / 2
        return self.n_edges / pairs if pairs else 0.0

    def neighbor_counts(self, onehot):
        """``adjacency @ onehot`` computed in row blocks (float32 is exact for counts below 2^24)."""
        out = np.empty(onehot.shape, dtype=np.float64)
        oh = onehot.astype(np.float32)
        for r in range(0, self.N, BLOCK):
            out[r : r + BLOCK] = self.adjacency[r : r + BLOCK].astype(np.float32) @ oh
        return out


def sample_network(g: Graphon, N: int, seed: int = 0, placement: str = "uniform") -> SampledNetwork:
    """W-random graph with ``N`` vertices; reproducible given ``seed``.

    ``placement="grid"`` puts vertex ``i`` at ``(i + 0.5) / N`` instead of a
    uniform draw.  Probabilities that are exactly 0 or 1 consume no random numbers.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = np.random.default_rng(seed)
    if placement == "uniform":
        pos = rng.random(N)
    elif placement == "grid":
        pos = (np.arange(N) + 0.5) / N
    else:
        raise ValueError(f"unknown placement {placement!r}")
    adj = np.zeros((N, N), dtype=bool)
    for r in range(0, N, BLOCK):
        rows = np.arange(r, min(r + BLOCK, N))
        p = np.asarray(evaluate(g, pos[rows, None], pos[None, :]), dtype=float)
        upper = np.arange(N)[None, :] > rows[:, None]
        p = np.where(upper, p, 0.0)
        edge = p >= 1.0
        frac = (p > 0.0) & ~edge
        if np.any(frac):
            u = rng.random(int(frac.sum()))
            edge[frac] = u < p[frac]
        adj[rows] = edge
    adj |= adj.T
    return SampledNetwork(N, pos, adj, seed, g)


def initial_states(n_states, N, x0, seed=0):
    """Per-agent initial states: ``x0`` is either an integer array of length N
    or a distribution over states, assigned in exact proportions (largest
    remainder) to a seeded random permutation of the agents."""
    x0 = np.asarray(x0)
    if x0.ndim == 1 and x0.shape[0] == N and np.issubdtype(x0.dtype, np.integer):
        return x0.astype(np.int64)
    p = np.asarray(x0, dtype=float)
    if p.shape != (n_states,) or abs(p.sum() - 1) > 1e-9:
        raise ValueError("x0 must be per-agent state indices or a distribution over states")
    raw = p * N
    counts = np.floor(raw).astype(int)
    rest = N - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    states = np.repeat(np.arange(n_states), counts)
    return np.random.default_rng([seed, 1]).permutation(states)


@dataclass
class SimResult:
    states: np.ndarray  # (T + 1, N)
    actions: np.ndarray  # (T, N)
    mu_hat: np.ndarray  # (T + 1, K, N_x)
    group: np.ndarray  # (N,)
    model: object

    def write_csv(self, path, aggregate_only=False):
        names = self.model.states
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if aggregate_only:
                w.writerow(["t", "state", "fraction"])
                for t, row in enumerate(self.states):
                    frac = np.bincount(row, minlength=len(names)) / len(row)
                    for x, f in enumerate(frac):
                        w.writerow([t, names[x], repr(float(f))])
                return
            w.writerow(["t", "agent", "state", "action"])
            acts = self.model.actions
            for t, row in enumerate(self.states):
                for i, x in enumerate(row):
                    a = acts[self.actions[t, i]] if t < len(self.actions) else ""
                    w.writerow([t, i, names[x], a])


def empirical_state(states, group, K, n_states):
    """Per-group empirical distribution ``(K, N_x)``; empty groups get the overall one."""
    overall = np.bincount(states, minlength=n_states) / len(states)
    out = np.tile(overall, (K, 1))
    for k in range(K):
        sel = states[group == k]
        if sel.size:
            out[k] = np.bincount(sel, minlength=n_states) / sel.size
    return out


def _sample_rows(rng, probs):
    u = rng.random(probs.shape[0])
    c = np.cumsum(probs, axis=-1)
    return np.minimum((u[:, None] >= c).sum(-1), probs.shape[-1] - 1)


def simulate(model, net: SampledNetwork, policy, x0, T, seed=0, structure=None) -> SimResult:
    """Simulate ``T`` steps of the N-agent system under ``policy``.

    Agents of group ``k`` (by position, through ``structure``) play
    ``policy.prescription(t, mu_hat_t)[k, x_i]``.  One seeded stream drives
    all action and transition draws, so identical seeds give identical paths.
    """
    N = net.N
    if structure is not None and structure.grid is not None:
        group = structure.group_of_class()[structure.grid.class_of(net.positions)]
        K = structure.K
    else:
        group = np.zeros(N, dtype=int)
        K = 1
    nx, na = model.n_states, model.n_actions
    x = initial_states(nx, N, x0, seed)
    rng = np.random.default_rng([seed, 2])
    states = np.empty((T + 1, N), dtype=np.int64)
    actions = np.empty((T, N), dtype=np.int64)
    mu_hat = np.empty((T + 1, K, nx))
    states[0] = x
    mu_hat[0] = empirical_state(x, group, K, nx)
    idx = np.arange(N)
    for t in range(1, T + 1):
        gamma = np.asarray(policy.prescription(t, mu_hat[t - 1]))
        a = _sample_rows(rng, gamma[group, x])
        counts = net.neighbor_counts(np.eye(nx)[x]) / N  # (N, N_x)
        drive = np.einsum("xay,ny->nxa", model.interaction, counts)
        Q = np.asarray(model.transition(drive))[idx, x, a]  # (N, N_x)
        x = _sample_rows(rng, Q)
        actions[t - 1] = a
        states[t] = x
        mu_hat[t] = empirical_state(x, group, K, nx)
    return SimResult(states, actions, mu_hat, group, model)


def mf_gap(sim: SimResult | np.ndarray, mf_path) -> np.ndarray:
    """Sup-norm distance ``||mu_hat_t - mu_t||`` for every t."""
    emp = sim.mu_hat if isinstance(sim, SimResult) else np.asarray(sim)
    ref = np.asarray(mf_path)
    if emp.shape != ref.shape:
        raise ValueError(f"empirical path {emp.shape} and mean-field path {ref.shape} do not match")
    return np.abs(emp - ref).reshape(len(emp), -1).max(-1)
