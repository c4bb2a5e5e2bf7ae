"""Forward population dynamics (discrete-time McKean-Vlasov map).

A population state is an array ``(K, N_x)`` of per-group distributions; a
prescription is ``(K, N_x, N_a)`` with row-stochastic ``[k, x, :]``.  All
functions accept extra leading batch axes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import aggregate, kernel

SIMPLEX_TOL = 1e-12
MASS_TOL = 1e-9


class ConsistencyError(RuntimeError):
    """Propagated mass drifted from one beyond tolerance."""


class DomainError(ValueError):
    """A population state left the region a policy is defined on."""


def validate_population(mu, tol=SIMPLEX_TOL):
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < -tol):
        raise ValueError("population state has negative mass")
    err = np.max(np.abs(mu.sum(-1) - 1.0))
    if err > tol:
        raise ValueError(f"population state rows sum to 1 only within {err:.3g}")
    return mu


def validate_prescription(gamma, tol=SIMPLEX_TOL):
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < -tol):
        raise ValueError("prescription has negative probability")
    err = np.max(np.abs(gamma.sum(-1) - 1.0))
    if err > tol:
        raise ValueError(f"prescription rows sum to 1 only within {err:.3g}")
    return gamma


def point_mass(n, index):
    v = np.zeros(n)
    v[index] = 1.0
    return v


def uniform_state(model, structure, dist=None):
    """Every group carries the same distribution (uniform unless given)."""
    dist = np.full(model.n_states, 1.0 / model.n_states) if dist is None else np.asarray(dist, dtype=float)
    return np.tile(dist, (structure.K, 1))


def constant_prescription(model, structure, action):
    """Every group plays ``action`` (index or name) in every state."""
    if isinstance(action, str):
        action = model.actions.index(action)
    g = np.zeros((structure.K, model.n_states, model.n_actions))
    g[..., action] = 1.0
    return g


def state_action_flow(mu, gamma, Q):
    """``sum_x sum_a mu(x) gamma(a|x) Q(y|x,a)`` over the last axes."""
    return np.einsum("...kx,...kxa,...kxay->...ky", mu, gamma, Q)


def propagate(model, structure, mu, gamma, Q=None):
    """One step of the population map: ``mu'_k(y) = sum_{x,a} mu_k(x) gamma_k(a|x) Q_k(y|x,a,mu)``.

    The kernel is evaluated at the current (pre-update) state.
    """
    mu = np.asarray(mu, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[-3:] != (structure.K, model.n_states, model.n_actions):
        raise ValueError(f"prescription shape {gamma.shape[-3:]} does not match the model")
    if Q is None:
        Q = kernel(model, structure, mu)
    nxt = state_action_flow(mu, gamma, Q)
    err = np.max(np.abs(nxt.sum(-1) - 1.0)) if nxt.size else 0.0
    if err > MASS_TOL:
        raise ConsistencyError(f"propagated mass deviates from 1 by {err:.3g}")
    # round-off only; mass error is already bounded above
    nxt = np.clip(nxt, 0.0, None)
    return nxt / nxt.sum(-1, keepdims=True)


@dataclass(frozen=True)
class ConstantPolicy:
    """The same prescription at every time and population state."""

    gamma: np.ndarray
    horizon: int | None = None

    def prescription(self, t, mu):
        return self.gamma


def closed_loop(model, structure, mu0, policy, T):
    """Population path ``[mu_0, ..., mu_T]`` and the prescriptions used at times 1..T."""
    mu = validate_population(mu0, tol=MASS_TOL)
    horizon = getattr(policy, "horizon", None)
    if horizon is not None and T > horizon:
        raise ValueError(f"trajectory length {T} exceeds the policy horizon {horizon}")
    path, used = [mu], []
    for t in range(1, T + 1):
        try:
            gamma = policy.prescription(t, mu)
        except DomainError as exc:
            raise DomainError(f"t={t}: {exc}") from exc
        mu = propagate(model, structure, mu, gamma)
        path.append(mu)
        used.append(np.asarray(gamma))
    return path, used


def trajectory(model, structure, mu0, policy, T):
    """Closed-loop population path ``[mu_0, ..., mu_T]`` with decisions at times 1..T.

    ``policy`` is anything with a ``prescription(t, mu)`` method.
    """
    return closed_loop(model, structure, mu0, policy, T)[0]


def trajectory_rows(model, path, t0=0):
    for t, mu in enumerate(path, start=t0):
        for k, row in enumerate(np.atleast_2d(mu)):
            for x, p in enumerate(row):
                yield t, k, model.states[x], p


def write_trajectory_csv(path_out, model, path):
    """Columns ``t, class, state, probability``."""
    with open(path_out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "class", "state", "probability"])
        for t, k, s, p in trajectory_rows(model, path):
            w.writerow([t, k, s, repr(float(p))])


def population_mass(structure, mu, state):
    """Lebesgue-weighted mass of ``state`` across groups."""
    return float(np.dot(structure.weights, np.asarray(mu)[..., state]) / structure.weights.sum())
