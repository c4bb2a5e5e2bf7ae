"""Equilibrium audits.

A single agent is negligible, so a unilateral deviation leaves the population
flow unchanged.  Against the frozen closed-loop flow the deviator faces an
ordinary finite MDP, whose exact dynamic-programming value bounds every
deviation (history-dependent ones included).  The gap between that value and
the exact value of the candidate strategy certifies the equilibrium.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import closed_loop
from .model import aggregate, kernel, rewards
from .solver_finite import stage_qvalues


def _stage_terms(model, structure, mu):
    drive = aggregate(model, structure, mu)
    return rewards(model, structure, mu, drive), kernel(model, structure, mu, drive)


def best_response_value(model, structure, mu_traj, T, terminal=None):
    """Optimal value ``W*_t(k, x)`` of one agent against the frozen states ``mu_traj[t - 1]``.

    Returns ``(T + 1, K, N_x)``; row ``T`` is the terminal value (zero by default).
    """
    W = np.zeros((T + 1, structure.K, model.n_states))
    if terminal is not None:
        W[T] = terminal
    for t in range(T, 0, -1):
        R, Q = _stage_terms(model, structure, mu_traj[t - 1])
        W[t - 1] = (R + model.discount * np.einsum("kxay,ky->kxa", Q, W[t])).max(-1)
    return W


def strategy_value(model, structure, mu_traj, prescriptions, terminal=None):
    """Exact value of following ``prescriptions[t - 1]`` against the frozen flow."""
    T = len(prescriptions)
    V = np.zeros((T + 1, structure.K, model.n_states))
    if terminal is not None:
        V[T] = terminal
    for t in range(T, 0, -1):
        R, Q = _stage_terms(model, structure, mu_traj[t - 1])
        qv = R + model.discount * np.einsum("kxay,ky->kxa", Q, V[t])
        V[t - 1] = (prescriptions[t - 1] * qv).sum(-1)
    return V


def truncation_horizon(model, tail_tol=1e-8):
    """Smallest horizon whose discounted tail ``delta^T * max|R| / (1 - delta)`` is below ``tail_tol``."""
    d, rb = model.discount, model.reward_bound
    if rb == 0:
        return 1
    return max(1, math.ceil(math.log(tail_tol * (1 - d) / rb) / math.log(d)))


@dataclass
class GapReport:
    gap: np.ndarray  # (T, K, N_x)
    v_policy: np.ndarray
    v_star: np.ndarray
    path: list
    interpolation_error: float
    tail_bound: float = 0.0
    states: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def max_gap(self) -> float:
        return float(self.gap.max()) if self.gap.size else 0.0

    @property
    def argmax(self):
        t, k, x = np.unravel_index(int(np.argmax(self.gap)), self.gap.shape)
        return int(t) + 1, int(k), int(x)

    def within(self, tol):
        return self.max_gap <= tol + self.interpolation_error + self.tail_bound

    def rows(self):
        T, K, nx = self.gap.shape
        for t in range(T):
            for k in range(K):
                for x in range(nx):
                    yield t + 1, k, self.states[x] if self.states else x, self.v_policy[t, k, x], self.v_star[t, k, x], self.gap[t, k, x]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "class", "state", "V_policy", "V_star", "gap"])
            for t, k, s, vp, vs, g in self.rows():
                w.writerow([t, k, s, repr(float(vp)), repr(float(vs)), repr(float(g))])

    def summary(self, tol=1e-5) -> str:
        return json.dumps({
            "max_gap": self.max_gap,
            "interpolation_error": self.interpolation_error,
            "tail_bound": self.tail_bound,
            "horizon": int(self.gap.shape[0]),
            "ok": bool(self.within(tol)),
        }, sort_keys=True)


def equilibrium_gap(model, structure, policy, mu0, tail_tol=1e-8, audit_steps=20) -> GapReport:
    """Unilateral-deviation gap of the closed-loop strategy started at ``mu0``.

    Finite horizons are audited at every decision time.  Stationary policies
    are audited at times ``1..audit_steps``, each followed by ``T_trunc`` more
    steps so that the dropped tail ``delta^T_trunc max|R| / (1 - delta)`` is
    below ``tail_tol``; both values carry that tail, so ``tail_bound`` is twice it.
    """
    if getattr(policy, "infinite", False):
        T = truncation_horizon(model, tail_tol)
        tail = 2 * model.discount**T * model.reward_bound / (1 - model.discount)
        n_audit, T = audit_steps, audit_steps + T
    else:
        T = n_audit = policy.horizon
        tail = 0.0
    path, used = closed_loop(model, structure, mu0, policy, T)
    W = best_response_value(model, structure, path, T)[:n_audit]
    V = strategy_value(model, structure, path, used)[:n_audit]
    gap = np.maximum(W - V, 0.0)
    table = np.array([policy.value(t, path[t - 1]) for t in range(1, n_audit + 1)])
    interp = float(np.max(np.abs(table - V)))
    return GapReport(gap, V, W, path, interp, tail, model.states, {"raw_min": float((W - V).min()), "flow_length": T})


@dataclass
class Violation:
    t: int
    node: int
    klass: int
    state: int
    kind: str  # "fixed_point" or "value"
    amount: float


def converse_scan(model, structure, policy, tol=None, times=None):
    """Re-check every stored grid point: the stored prescription must be a best
    response to its own induced next state, and the stored value must equal the
    objective it generates.  Returns the list of violations above ``tol``.

    ``times`` restricts a finite-horizon audit to the given decision times.
    """
    tol = policy.cfg.tol if tol is None else tol
    nodes = policy.grid.nodes
    if getattr(policy, "infinite", False):
        stages = [(0, policy.gamma, policy.values, policy.continuation())]
    else:
        T = policy.horizon
        stages = [(t, policy.gammas[t - 1], policy.values[t - 1], policy.continuation(t) if t < T or np.any(policy.values[T]) else None)
                  for t in (times or range(1, T + 1))]
    out = []
    for t, gamma, value, cont in stages:
        qv = stage_qvalues(model, structure, nodes, gamma, cont)
        gain = qv.max(-1) - (gamma * qv).sum(-1)
        vres = np.abs(value - (gamma * qv).sum(-1))
        for kind, amount in (("fixed_point", gain), ("value", vres)):
            for p, k, x in np.argwhere(amount > tol):
                out.append(Violation(t, int(p), int(k), int(x), kind, float(amount[p, k, x])))
    return out


def corrupt(policy, t, node, klass, state, shift=1):
    """Copy of ``policy`` with one prescription row rotated by ``shift`` actions
    (for two actions: the row is flipped)."""
    import copy

    bad = copy.copy(policy)
    if getattr(policy, "infinite", False):
        bad.gamma = policy.gamma.copy()
        row = bad.gamma[node, klass, state]
    else:
        bad.gammas = policy.gammas.copy()
        row = bad.gammas[t - 1, node, klass, state]
    row[:] = np.roll(row.copy(), shift)
    return bad
