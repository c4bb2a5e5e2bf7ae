"""Stationary equilibrium for the discounted infinite-horizon game.

The pair (prescription map, value) is found by modified policy iteration:
blocks of value sweeps with the prescriptions frozen, alternated with stage
fixed-point re-solves against the current value.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import propagate
from .grid import MeanFieldGrid
from .solver_finite import (FixedPointConfig, StageProblem, deviation_gain, stage_fixed_point)


class NonConvergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class InfiniteConfig:
    sweeps_per_update: int = 10
    tol: float = 1e-8
    tol_V: float = 1e-8
    max_sweeps: int = 10**4

    def to_dict(self):
        return asdict(self)


@dataclass
class StationarySolution:
    model: object
    structure: object
    grid: MeanFieldGrid
    cfg: FixedPointConfig
    gamma: np.ndarray  # (P, K, N_x, N_a)
    values: np.ndarray  # (P, K, N_x)
    value_residual: float
    prescription_residual: float
    iterations: int
    history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    horizon = None

    @property
    def infinite(self) -> bool:
        return True

    def value(self, t, mu=None):
        if mu is None:
            t, mu = None, t
        return self.grid.interpolate(self.values, mu)

    def continuation(self, t=None):
        return lambda m: self.grid.interpolate(self.values, m)

    def prescription(self, t, mu):
        mu = np.asarray(mu, dtype=float)
        node = self.grid.node_index(mu)
        if node is not None:
            return self.gamma[node]
        if self.cfg.lookup == "interpolate":
            return self.grid.interpolate(self.gamma, mu)
        return stage_fixed_point(self.model, self.structure, mu, self.continuation(), self.cfg, init=None, rng_key=0).gamma


class _FrozenEvaluation:
    """Bellman evaluation operator of a fixed prescription map on the grid."""

    def __init__(self, prob: StageProblem, grid: MeanFieldGrid, gamma, discount):
        self.reward = (gamma * prob.R).sum(-1)
        self.trans = np.einsum("pkxa,pkxay->pkxy", gamma, prob.Q)
        self.index, self.weight = grid.locate(prob.next_state(gamma))
        self.discount = discount

    def __call__(self, V):
        W = (V[self.index] * self.weight[..., None, None]).sum(1)
        return self.reward + self.discount * np.einsum("pkxy,pky->pkx", self.trans, W)


def bellman_residual(model, structure, grid, gamma, V):
    prob = StageProblem.build(model, structure, grid.nodes)
    op = _FrozenEvaluation(prob, grid, gamma, model.discount)
    return float(np.max(np.abs(op(V) - V)))


def solve_infinite(model, structure, mf_grid: MeanFieldGrid | None = None, cfg: FixedPointConfig | None = None,
                   icfg: InfiniteConfig | None = None) -> StationarySolution:
    """Time-invariant (prescription map, value) pair, starting from V = 0 and the myopic map.

    Value sweeps stop once a sweep moves ``V`` by less than ``tol_V * (1 - delta)``, so
    every further application of the Bellman operator stays within ``tol_V`` of ``V``.
    """
    cfg = cfg or FixedPointConfig()
    icfg = icfg or InfiniteConfig()
    if not 0 < model.discount < 1:
        raise ValueError("the infinite-horizon solver needs a discount in (0, 1)")
    mf_grid = mf_grid or MeanFieldGrid.for_model(model, structure)
    nodes = mf_grid.nodes
    prob = StageProblem.build(model, structure, nodes)
    V = np.zeros(nodes.shape[:-1] + (model.n_states,))
    gamma = stage_fixed_point(model, structure, nodes, None, cfg, rng_key=0).gamma
    history = []
    ratios = []
    sweeps = 0
    outer = 0
    res_V = np.inf
    stop_V = icfg.tol_V * (1 - model.discount)
    while True:
        op = _FrozenEvaluation(prob, mf_grid, gamma, model.discount)
        prev = None
        for _ in range(icfg.sweeps_per_update):
            Vn = op(V)
            res_V = float(np.max(np.abs(Vn - V)))
            V = Vn
            sweeps += 1
            history.append(res_V)
            if prev is not None and prev > 1e-13:
                ratios.append(res_V / prev)
            prev = res_V
            if res_V < stop_V:
                break
        outer += 1
        cont = lambda m, V=V: mf_grid.interpolate(V, m)
        res = stage_fixed_point(model, structure, nodes, cont, cfg, init=gamma, rng_key=outer)
        d_gamma = float(np.max(np.abs(res.gamma - gamma)))
        gamma = res.gamma
        if d_gamma <= icfg.tol and res_V < stop_V:
            break
        if sweeps >= icfg.max_sweeps:
            raise NonConvergenceError(
                f"no stationary solution after {sweeps} sweeps: value residual {res_V:.3g}, "
                f"prescription change {d_gamma:.3g}",
                history,
            )
    final_prob = StageProblem(model, structure, nodes, prob.Q, prob.R, lambda m: mf_grid.interpolate(V, m))
    presc_res = float(np.max(deviation_gain(gamma, final_prob.qvalues(gamma))))
    val_res = bellman_residual(model, structure, mf_grid, gamma, V)
    diag = {
        "outer_iterations": outer,
        "sweeps": sweeps,
        "max_contraction_ratio": max(ratios) if ratios else 0.0,
        "multiple_equilibria_points": int(res.multiple.sum()),
        "a5_ties": [{"node": int(p), "class": int(k), "state": int(x)} for p, k, x in np.argwhere(res.ties)],
    }
    return StationarySolution(model, structure, mf_grid, cfg, gamma, V, val_res, presc_res, sweeps, history, diag)


@dataclass
class StationaryResult:
    mu: np.ndarray
    steps: int
    converged: bool
    residual: float
    cycle_period: int | None
    path: list


def stationary_mean_field(model, structure, policy, mu0, tol=1e-6, max_steps=500, window=100) -> StationaryResult:
    """Iterate ``mu <- phi(mu, policy(mu))`` to a fixed point, flagging cycles.

    A cycle is reported when the current state revisits (within ``tol``) one
    of the last ``window`` iterates other than its predecessor.
    """
    mu = np.asarray(mu0, dtype=float)
    path = [mu]
    residual = np.inf
    for step in range(1, max_steps + 1):
        nxt = propagate(model, structure, mu, policy.prescription(step, mu))
        residual = float(np.max(np.abs(nxt - mu)))
        path.append(nxt)
        mu = nxt
        if residual < tol:
            return StationaryResult(mu, step, True, residual, None, path)
        recent = path[-window - 1 : -2]
        for lag, old in enumerate(reversed(recent), start=2):
            if np.max(np.abs(old - mu)) < tol:
                return StationaryResult(mu, step, False, residual, lag, path)
    return StationaryResult(mu, max_steps, False, residual, None, path)
