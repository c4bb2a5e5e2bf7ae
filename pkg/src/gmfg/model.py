"""Game instances: finite state/action sets, graphon-coupled kernel, reward.

Arrays carry arbitrary leading batch dimensions followed by the group axis
``K``; e.g. a population state is ``(..., K, N_x)`` and a kernel is
``(..., K, N_x, N_a, N_x)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_TIE_TOL = 1e-9


class ModelDefinitionError(ValueError):
    """A user-supplied rule produced an invalid transition kernel or reward."""


@dataclass(frozen=True)
class AffineKernel:
    """Transition rule ``Q(y | x, a) = base[x, a, y] + drive(x, a) * slope[x, a, y]``.

    ``base`` rows must be distributions and ``slope`` rows must sum to zero; the
    result is validated against [0, 1] whenever it is evaluated.
    """

    base: np.ndarray
    slope: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        slope = np.asarray(self.slope, dtype=float)
        if base.shape != slope.shape or base.ndim != 3:
            raise ModelDefinitionError("kernel base and slope must both have shape (N_x, N_a, N_x)")
        if np.max(np.abs(base.sum(-1) - 1)) > 1e-12:
            raise ModelDefinitionError("kernel base rows must sum to one")
        if np.max(np.abs(slope.sum(-1))) > 1e-12:
            raise ModelDefinitionError("kernel slope rows must sum to zero")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "slope", slope)

    def __call__(self, drive):
        return self.base + drive[..., None] * self.slope

    def describe(self):
        return {"rule": "affine", "base": self.base.tolist(), "slope": self.slope.tolist()}


@dataclass(frozen=True)
class LinearReward:
    """``R(x, a) = base[x, a] + drive_coef[x, a] * drive(x, a) + sum_y mu_coef[x, a, y] * mu(y)``."""

    base: np.ndarray
    drive_coef: np.ndarray | None = None
    mu_coef: np.ndarray | None = None

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        object.__setattr__(self, "base", base)
        dc = np.zeros_like(base) if self.drive_coef is None else np.asarray(self.drive_coef, dtype=float)
        mc = np.zeros(base.shape + (base.shape[0],)) if self.mu_coef is None else np.asarray(self.mu_coef, dtype=float)
        object.__setattr__(self, "drive_coef", dc)
        object.__setattr__(self, "mu_coef", mc)

    def __call__(self, mu, drive):
        return self.base + self.drive_coef * drive + np.einsum("xay,...y->...xa", self.mu_coef, mu)

    def bound(self, max_drive):
        return float(np.max(np.abs(self.base) + np.abs(self.drive_coef) * max_drive + np.abs(self.mu_coef).max(-1)))

    def describe(self):
        return {
            "rule": "linear",
            "base": self.base.tolist(),
            "drive_coef": self.drive_coef.tolist(),
            "mu_coef": self.mu_coef.tolist(),
        }


@dataclass(frozen=True)
class ModelSpec:
    """A finite graphon mean-field game.

    ``interaction[x, a, y]`` is the integrand ``f(x, a, y)`` whose graphon
    quadrature gives the aggregate drive; ``local[x, a]`` is the local drift
    ``f0`` (used by the diagnostics); ``transition`` maps a drive array
    ``(..., N_x, N_a)`` to a kernel ``(..., N_x, N_a, N_x)``; ``reward`` maps
    ``(mu_k (..., N_x), drive (..., N_x, N_a))`` to ``(..., N_x, N_a)``.
    ``horizon=None`` means infinite horizon.
    """

    states: tuple
    actions: tuple
    interaction: np.ndarray
    local: np.ndarray
    transition: Callable
    reward: Callable
    discount: float
    horizon: int | None = None
    name: str = "custom"
    reward_bound: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        nx, na = len(self.states), len(self.actions)
        if nx < 1 or na < 1:
            raise ValueError("state and action sets must be nonempty")
        f = np.asarray(self.interaction, dtype=float)
        if f.shape != (nx, na, nx):
            raise ValueError(f"interaction must have shape {(nx, na, nx)}, got {f.shape}")
        f0 = np.asarray(self.local, dtype=float)
        if f0.shape != (nx, na):
            raise ValueError(f"local dynamics must have shape {(nx, na)}, got {f0.shape}")
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "interaction", f)
        object.__setattr__(self, "local", f0)
        if self.horizon is None:
            if not 0.0 < self.discount < 1.0:
                raise ValueError(f"discount must lie in (0, 1) for an infinite horizon, got {self.discount}")
        else:
            if int(self.horizon) != self.horizon or self.horizon < 1:
                raise ValueError(f"horizon must be a positive integer, got {self.horizon}")
            if not 0.0 <= self.discount <= 1.0:
                raise ValueError(f"discount must lie in [0, 1] for a finite horizon, got {self.discount}")
        object.__setattr__(self, "reward_bound", self._probe_reward_bound())

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def max_drive(self) -> float:
        return float(np.abs(self.interaction).sum(-1).max()) if self.interaction.size else 0.0

    def _probe_reward_bound(self) -> float:
        # Vertices, barycentre and a fixed random sample of the simplex, each
        # against the extreme drives.
        nx = self.n_states
        rng = np.random.default_rng(0)
        mus = np.vstack([np.eye(nx), np.full((1, nx), 1.0 / nx), rng.dirichlet(np.ones(nx), size=32)])
        dmax = self.max_drive
        bound = 0.0
        with np.errstate(all="ignore"):
            for d in (0.0, dmax, -dmax, 0.5 * dmax):
                drive = np.full((len(mus), nx, self.n_actions), d)
                r = np.asarray(self.reward(mus, drive), dtype=float)
                if r.shape != drive.shape or not np.all(np.isfinite(r)):
                    raise ModelDefinitionError("reward is not finite on the state simplex (R must be absolutely bounded)")
                bound = max(bound, float(np.abs(r).max()))
        if isinstance(self.reward, LinearReward):
            bound = max(bound, self.reward.bound(dmax))
        return bound

    def with_(self, **changes) -> "ModelSpec":
        d = {k: getattr(self, k) for k in ("states", "actions", "interaction", "local", "transition", "reward", "discount", "horizon", "name")}
        d.update(changes)
        return ModelSpec(**d)

    def describe(self) -> dict:
        def rule(obj):
            return obj.describe() if hasattr(obj, "describe") else {"rule": getattr(obj, "__qualname__", repr(obj))}

        return {
            "name": self.name,
            "states": list(self.states),
            "actions": list(self.actions),
            "interaction": self.interaction.tolist(),
            "local": self.local.tolist(),
            "transition": rule(self.transition),
            "reward": rule(self.reward),
            "discount": self.discount,
            "horizon": "infinite" if self.horizon is None else int(self.horizon),
        }

    def hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def malware_model(q=0.9, k=0.3, lam=0.2, discount=0.9, horizon=None) -> ModelSpec:
    """Node repair game: states (healthy, infected), actions (no_repair, repair).

    Without repair a healthy node is infected with probability equal to the
    graphon-weighted infected mass times ``q``; repair resets the node to healthy.
    Reward is ``-k * x - lam * a``.
    """
    H, I = 0, 1
    f = np.zeros((2, 2, 2))
    f[:, :, I] = q
    f0 = np.array([[0.0, 0.0], [1.0, 0.0]])
    base = np.zeros((2, 2, 2))
    slope = np.zeros((2, 2, 2))
    base[H, 0] = [1.0, 0.0]
    slope[H, 0] = [-1.0, 1.0]
    base[I, 0] = [0.0, 1.0]
    base[:, 1] = [1.0, 0.0]
    reward = LinearReward(base=np.array([[0.0, -lam], [-k, -k - lam]]))
    return ModelSpec(
        states=("healthy", "infected"),
        actions=("no_repair", "repair"),
        interaction=f,
        local=f0,
        transition=AffineKernel(base, slope),
        reward=reward,
        discount=discount,
        horizon=horizon,
        name=f"malware(q={q:g},k={k:g},lambda={lam:g})",
    )


def aggregate(model: ModelSpec, structure, mu) -> np.ndarray:
    """Graphon quadrature of the interaction term for every (group, x, a).

    ``mu`` is ``(..., K, N_x)``; returns ``(..., K, N_x, N_a)`` with entry
    ``sum_l coupling[k, l] * sum_y f(x, a, y) * mu_l(y)``.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.ndim < 2 or mu.shape[-2] != structure.K or mu.shape[-1] != model.n_states:
        raise ValueError(f"population state shape {mu.shape[-2:]} does not match (K={structure.K}, N_x={model.n_states})")
    per_group = np.einsum("xay,...ly->...lxa", model.interaction, mu)
    return np.einsum("kl,...lxa->...kxa", structure.coupling, per_group)


def check_kernel(Q, tol=1e-12):
    """Raise ModelDefinitionError naming the first (x, a) whose row is not a distribution."""
    bad = (Q < -tol) | (Q > 1 + tol)
    rows = np.abs(Q.sum(-1) - 1) > tol
    bad_xa = np.any(bad, axis=-1) | rows
    if np.any(bad_xa):
        idx = np.argwhere(bad_xa.reshape(-1, *bad_xa.shape[-2:]).any(axis=0))[0]
        raise ModelDefinitionError(f"transition rule is not a distribution at (x={idx[0]}, a={idx[1]})")


def kernel(model: ModelSpec, structure, mu, drive=None) -> np.ndarray:
    """Transition kernel ``Q(y | x, a, mu; g)`` for every group: ``(..., K, N_x, N_a, N_x)``."""
    if drive is None:
        drive = aggregate(model, structure, mu)
    Q = np.asarray(model.transition(drive), dtype=float)
    check_kernel(Q)
    return Q


def rewards(model: ModelSpec, structure, mu, drive=None) -> np.ndarray:
    if drive is None:
        drive = aggregate(model, structure, mu)
    return np.asarray(model.reward(np.asarray(mu, dtype=float), drive), dtype=float)


def _max_quotient(values, axis):
    if values.shape[axis] < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(values, axis=axis))))


def check_assumptions(model: ModelSpec, structure=None, argmax_ties=None, tie_tolerance=DEFAULT_TIE_TOL) -> dict:
    """Diagnostics for the existence conditions; never raises.

    A1 holds for every finite action set.  A2-A4 are reported as finite
    difference quotients over adjacent state/action indices, probed at the
    simplex vertices and barycentre.  A5 is filled from the argmax ties a
    solver recorded (``argmax_ties``: iterable of tie records).
    """
    from .graphon import PopulationStructure

    structure = structure or PopulationStructure.single()
    nx, K = model.n_states, structure.K
    probes = np.vstack([np.eye(nx), np.full((1, nx), 1.0 / nx)])
    mu = np.broadcast_to(probes[:, None, :], (len(probes), K, nx))
    drive = aggregate(model, structure, mu)
    drift = model.local + drive
    R = rewards(model, structure, mu, drive)
    report = {
        "A1": {"holds": True, "n_actions": model.n_actions, "note": "finite action set"},
        "A2": {
            "lipschitz_drift_x": _max_quotient(drift, -2),
            "lipschitz_reward_x": _max_quotient(R, -2),
            "continuity_a": "automatic (finite action set)",
        },
        "A3": {
            "second_difference_drift_x": _max_quotient(np.diff(drift, axis=-2), -2) if nx > 2 else 0.0,
            "second_difference_reward_x": _max_quotient(np.diff(R, axis=-2), -2) if nx > 2 else 0.0,
        },
        "A4": {"lipschitz_drift_a": _max_quotient(drift, -1)},
    }
    ties = list(argmax_ties or [])
    report["A5"] = {
        "checked": argmax_ties is not None,
        "tie_tolerance": tie_tolerance,
        "n_ties": len(ties),
        "singleton": len(ties) == 0,
        "ties": ties[:50],
    }
    report["reward_bound"] = model.reward_bound
    return report
